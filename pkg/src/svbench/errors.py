"""Exception hierarchy shared by all svbench modules."""


class SvbenchError(Exception):
    """Base class for all domain errors raised by svbench."""


class FormatError(SvbenchError):
    pass


class DuplicateIdError(SvbenchError):
    pass


class TruncationError(SvbenchError):
    pass


class IoError(SvbenchError):
    pass


class EmptyClassError(SvbenchError):
    pass


class DegenerateEmbeddingError(SvbenchError):
    pass


class DimensionError(SvbenchError):
    pass


class MissingIdError(SvbenchError):
    pass


class DegenerateCohortError(SvbenchError):
    pass


class SingleClassError(SvbenchError):
    pass


class TrialMismatchError(SvbenchError):
    pass


class WeightError(SvbenchError):
    pass


class InfeasibleSamplingError(SvbenchError):
    pass


class EmptyEnrollmentError(SvbenchError):
    pass


class ParamError(SvbenchError):
    pass


class DegenerateNoiseError(SvbenchError):
    pass


class DegenerateSignalError(SvbenchError):
    pass


class InputTooShortError(SvbenchError):
    pass


class DivergenceError(SvbenchError):
    pass
