"""Core data types and file formats: embeddings, trials, scores, manifests.

Embedding files are binary little-endian:
    magic "SVEB" | u32 version=1 | u32 dimension | u32 record_count
    then per record: u32 id_byte_length | id bytes (UTF-8) | dimension x f64

Trial files are UTF-8 text, one trial per line:
    labeled:   "<label> <enroll_id> <test_id>"   label in {target, nontarget}
    unlabeled: "<enroll_id> <test_id>"

Score files: "<enroll_id> <test_id> <score>" with the score printed at 17
significant digits so that float64 values roundtrip exactly.

Manifest files: "<utt_id> <speaker_id> <genre> <duration_s> <path>".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateIdError,
    FormatError,
    IoError,
    MissingIdError,
    TruncationError,
)

MAGIC = b"SVEB"
FORMAT_VERSION = 1

TARGET = "target"
NONTARGET = "nontarget"


@dataclass(frozen=True)
class Embedding:
    id: str
    vector: np.ndarray  # float64, shape (dim,)

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))
        if not self.id or any(c.isspace() for c in self.id):
            raise FormatError(f"invalid embedding id: {self.id!r}")

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.vector, other.vector)

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.vector))


class EmbeddingStore:
    """Immutable-by-convention ordered collection of same-dimension embeddings."""

    def __init__(self, dimension: int, records: list[Embedding] | None = None):
        if dimension < 1:
            raise FormatError(f"dimension must be >= 1, got {dimension}")
        self.dimension = int(dimension)
        self.records: list[Embedding] = []
        self._index: dict[str, int] = {}
        for rec in records or []:
            self.add(rec)

    def add(self, rec: Embedding):
        if rec.vector.shape != (self.dimension,):
            raise FormatError(
                f"embedding {rec.id!r} has length {rec.vector.shape[0]}, "
                f"store dimension is {self.dimension}"
            )
        if rec.id in self._index:
            raise DuplicateIdError(f"duplicate embedding id: {rec.id!r}")
        self._index[rec.id] = len(self.records)
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __contains__(self, emb_id: str):
        return emb_id in self._index

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return self.dimension == other.dimension and self.records == other.records

    def get(self, emb_id: str) -> Embedding:
        try:
            return self.records[self._index[emb_id]]
        except KeyError:
            raise MissingIdError(f"id not in embedding store: {emb_id!r}") from None

    def vector(self, emb_id: str) -> np.ndarray:
        return self.get(emb_id).vector

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.dimension))
        return np.stack([r.vector for r in self.records])


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str | None = None  # TARGET, NONTARGET or None

    def __post_init__(self):
        if self.label not in (None, TARGET, NONTARGET):
            raise FormatError(f"bad trial label: {self.label!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.enroll_id, self.test_id)


@dataclass(frozen=True)
class ScoreRecord:
    enroll_id: str
    test_id: str
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise FormatError(
                f"non-finite score for ({self.enroll_id}, {self.test_id})"
            )

    @property
    def key(self) -> tuple[str, str]:
        return (self.enroll_id, self.test_id)


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    speaker_id: str
    genre: str
    duration_s: float
    path: str

    def __post_init__(self):
        if self.duration_s <= 0:
            raise FormatError(f"non-positive duration for {self.utt_id!r}")


@dataclass
class UtteranceManifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.utt_id in seen:
                raise DuplicateIdError(f"duplicate utt id: {row.utt_id!r}")
            seen.add(row.utt_id)

    def __len__(self):
        return len(self.rows)

    def durations(self) -> dict[str, float]:
        return {r.utt_id: r.duration_s for r in self.rows}

    def speaker_map(self) -> dict[str, str]:
        return {r.utt_id: r.speaker_id for r in self.rows}


# ---------------------------------------------------------------------------
# Embedding file I/O


def save_embeddings(store: EmbeddingStore, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<III", FORMAT_VERSION, store.dimension, len(store)))
            for rec in store.records:
                id_bytes = rec.id.encode("utf-8")
                f.write(struct.pack("<I", len(id_bytes)))
                f.write(id_bytes)
                f.write(rec.vector.astype("<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write embeddings to {path}: {exc}") from exc


def load_embeddings(path) -> EmbeddingStore:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IoError(f"cannot read embeddings from {path}: {exc}") from exc

    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad or missing embedding file header")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dim < 1:
        raise FormatError(f"{path}: header dimension {dim} invalid")

    store = EmbeddingStore(dim)
    offset = 16
    for i in range(count):
        if offset + 4 > len(data):
            raise TruncationError(f"{path}: truncated at record {i}")
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + id_len + 8 * dim > len(data):
            raise TruncationError(f"{path}: truncated at record {i}")
        try:
            emb_id = data[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: bad id encoding at record {i}") from exc
        offset += id_len
        vec = np.frombuffer(data, dtype="<f8", count=dim, offset=offset).copy()
        offset += 8 * dim
        store.add(Embedding(emb_id, vec))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return store


# ---------------------------------------------------------------------------
# Text formats


def parse_trials(path, labeled: bool) -> list[Trial]:
    trials = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if labeled:
                if len(fields) != 3:
                    raise FormatError(
                        f"{path}:{lineno}: expected 3 fields, got {len(fields)}"
                    )
                label, enroll, test = fields
                if label not in (TARGET, NONTARGET):
                    raise FormatError(f"{path}:{lineno}: unknown label {label!r}")
                trials.append(Trial(enroll, test, label))
            else:
                if len(fields) != 2:
                    raise FormatError(
                        f"{path}:{lineno}: expected 2 fields, got {len(fields)}"
                    )
                trials.append(Trial(fields[0], fields[1]))
    return trials


def save_trials(trials, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            if t.label is not None:
                f.write(f"{t.label} {t.enroll_id} {t.test_id}\n")
            else:
                f.write(f"{t.enroll_id} {t.test_id}\n")


def format_score(value: float) -> str:
    return format(float(value), ".17g")


def save_scores(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.enroll_id} {r.test_id} {format_score(r.score)}\n")


def load_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if len(fields) != 3:
                raise FormatError(
                    f"{path}:{lineno}: expected 3 fields, got {len(fields)}"
                )
            try:
                score = float(fields[2])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad score {fields[2]!r}") from None
            records.append(ScoreRecord(fields[0], fields[1], score))
    return records


def load_manifest(path) -> UtteranceManifest:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if len(fields) != 5:
                raise FormatError(
                    f"{path}:{lineno}: expected 5 fields, got {len(fields)}"
                )
            utt, spk, genre, dur, p = fields
            try:
                dur_s = float(dur)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad duration {dur!r}") from None
            rows.append(ManifestRow(utt, spk, genre, dur_s, p))
    return UtteranceManifest(rows)


def save_manifest(manifest: UtteranceManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.rows:
            f.write(f"{r.utt_id} {r.speaker_id} {r.genre} {format_score(r.duration_s)} {r.path}\n")


def load_durations(path) -> dict[str, float]:
    """Parse a "<id> <seconds>" text file into a duration map."""
    durations = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if len(fields) != 2:
                raise FormatError(
                    f"{path}:{lineno}: expected 2 fields, got {len(fields)}"
                )
            try:
                durations[fields[0]] = float(fields[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad duration {fields[1]!r}") from None
    return durations
