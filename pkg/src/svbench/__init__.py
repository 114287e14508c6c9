"""svbench: speaker-verification back-end toolkit.

Margin-softmax loss kernels with analytic gradients, a two-stage training
schedule with a deterministic toy trainer, waveform augmentation and
filterbank features, and the full scoring chain (cosine, adaptive score
normalization, quality-aware calibration, fusion) with EER/minDCF metrics.
"""

__version__ = "0.1.0"
