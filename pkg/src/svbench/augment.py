"""Waveform augmentation and feature extraction.

Speed(+pitch) perturbation is bandlimited resampling of the time axis (the
classic `speed` effect: duration / ratio, pitch * ratio); tempo perturbation
is WSOLA time-scale modification (duration changes, pitch preserved).
Additive noise mixing targets an exact SNR over the full utterance and
reverberation is a full convolution with a room impulse response. Features
are log-mel filterbanks (HTK mel scale) with optional per-dimension mean
normalization over time.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.signal import fftconvolve, get_window, resample_poly

from .datamodel import ManifestRow, UtteranceManifest
from .errors import (
    DegenerateNoiseError,
    DegenerateSignalError,
    FormatError,
    InputTooShortError,
    IoError,
    ParamError,
)

NOISE_TYPES = ("babble", "noise", "music", "reverb")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FormatError("waveform must be a nonempty 1-D sequence")
        if self.sample_rate_hz < 1:
            raise FormatError("sample rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class AugmentPolicy:
    speed_ratios: tuple[float, ...] = (0.9, 1.0, 1.1)
    noise_probability: float = 0.6
    noise_types: tuple[str, ...] = NOISE_TYPES
    relabel_on_speed: bool = True

    def __post_init__(self):
        self.speed_ratios = tuple(sorted(self.speed_ratios))
        self.noise_types = tuple(sorted(self.noise_types))
        if 1.0 not in self.speed_ratios:
            raise ParamError("speed_ratios must contain 1.0")
        if not (0.0 <= self.noise_probability <= 1.0):
            raise ParamError("noise_probability must be in [0,1]")
        for t in self.noise_types:
            if t not in NOISE_TYPES:
                raise ParamError(f"unknown noise type {t!r}")


@dataclass(frozen=True)
class AugmentDecision:
    speed_ratio: float
    noise_type: str | None  # None when no noise augmentation this draw


@dataclass
class FbankConfig:
    n_mels: int = 80
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = 512
    mean_normalize: bool = True
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1 or self.n_mels > self.fft_size // 2:
            raise ParamError("need 1 <= n_mels <= fft_size/2")


def sample_augmentation(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentDecision:
    """Draw one augmentation decision per the online policy."""
    ratio = float(rng.choice(policy.speed_ratios))
    noise_type = None
    if policy.noise_types and rng.random() < policy.noise_probability:
        noise_type = str(rng.choice(policy.noise_types))
    return AugmentDecision(ratio, noise_type)


def _check_ratio(ratio: float):
    if not (0.5 <= ratio <= 2.0):
        raise ParamError(f"perturbation ratio {ratio} out of [0.5, 2.0]")


def perturb_speed_pitch(w: Waveform, ratio: float) -> Waveform:
    """Resampling-style speed change: length ~ len/ratio, pitch * ratio."""
    _check_ratio(ratio)
    frac = Fraction(ratio).limit_denominator(1000)
    up, down = frac.denominator, frac.numerator
    if up == down:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    out = resample_poly(w.samples, up, down)
    return Waveform(out, w.sample_rate_hz)


def perturb_tempo(
    w: Waveform,
    ratio: float,
    frame_s: float = 0.030,
    tolerance_s: float = 0.015,
) -> Waveform:
    """WSOLA time-scale modification: length ~ len/ratio, pitch preserved."""
    _check_ratio(ratio)
    if ratio == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate_hz)

    rate = w.sample_rate_hz
    frame = max(4, int(round(frame_s * rate)) & ~1)
    hop_syn = frame // 2
    tol = max(1, int(round(tolerance_s * rate)))
    x = w.samples
    target_len = int(round(len(x) / ratio))

    pad = tol + frame + hop_syn
    xp = np.concatenate((np.zeros(tol), x, np.zeros(pad)))
    window = get_window("hann", frame, fftbins=True)

    out = np.zeros(target_len + frame)
    acc = np.zeros(target_len + frame)
    natural = None
    out_pos = 0
    k = 0
    while out_pos < target_len:
        center = tol + int(round(k * hop_syn * ratio))
        if natural is None:
            delta = 0
        else:
            segment = xp[center - tol : center + tol + frame]
            corr = np.correlate(segment, natural, mode="valid")
            delta = int(np.argmax(corr)) - tol
        start = center + delta
        frame_k = xp[start : start + frame]
        out[out_pos : out_pos + frame] += frame_k * window
        acc[out_pos : out_pos + frame] += window
        natural = xp[start + hop_syn : start + hop_syn + frame]
        out_pos += hop_syn
        k += 1

    out = out[:target_len] / np.maximum(acc[:target_len], 1e-12)
    return Waveform(out, rate)


def mix_noise(w: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, int]:
    """Add noise scaled to the requested SNR; returns (mixed, clipped-sample count)."""
    if noise.sample_rate_hz != w.sample_rate_hz:
        raise FormatError("sample rate mismatch between signal and noise")
    sig_power = float(np.mean(w.samples**2))
    if sig_power == 0.0:
        raise DegenerateSignalError("SNR undefined for an all-zero signal")
    reps = int(math.ceil(len(w) / len(noise)))
    n = np.tile(noise.samples, reps)[: len(w)]
    noise_power = float(np.mean(n**2))
    if noise_power == 0.0:
        raise DegenerateNoiseError("noise has zero power over the mixing span")
    gain = math.sqrt(sig_power / (noise_power * 10.0 ** (snr_db / 10.0)))
    mixed = w.samples + gain * n
    clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    mixed = np.clip(mixed, -1.0, 1.0)
    return Waveform(mixed, w.sample_rate_hz), clipped


def apply_reverb(w: Waveform, rir: Waveform) -> Waveform:
    """Convolve with a room impulse response, truncate to the input length,
    peak-normalize to the input's peak level."""
    if rir.sample_rate_hz != w.sample_rate_hz:
        raise FormatError("sample rate mismatch between signal and RIR")
    if not np.any(rir.samples):
        raise DegenerateNoiseError("all-zero room impulse response")
    out = fftconvolve(w.samples, rir.samples)[: len(w)]
    peak = float(np.max(np.abs(out)))
    in_peak = float(np.max(np.abs(w.samples)))
    if peak > 0.0:
        out = out * (in_peak / peak)
    return Waveform(out, w.sample_rate_hz)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(config: FbankConfig, sample_rate_hz: int) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel filters."""
    lo, hi = hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0)
    points = np.linspace(lo, hi, config.n_mels + 2)
    return mel_to_hz(points[1:-1])


def _mel_filterbank(config: FbankConfig, sample_rate_hz: int) -> np.ndarray:
    n_bins = config.fft_size // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate_hz / config.fft_size
    lo, hi = hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0)
    edges = mel_to_hz(np.linspace(lo, hi, config.n_mels + 2))
    bank = np.zeros((config.n_mels, n_bins))
    for i in range(config.n_mels):
        left, center, right = edges[i], edges[i + 1], edges[i + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        bank[i] = np.maximum(0.0, np.minimum(up, down))
    return bank


def fbank(w: Waveform, config: FbankConfig) -> np.ndarray:
    """Log-mel filterbank features, shape (n_mels, n_frames)."""
    rate = w.sample_rate_hz
    frame_len = int(round(config.frame_length_ms * rate / 1000.0))
    frame_shift = int(round(config.frame_shift_ms * rate / 1000.0))
    if len(w) < frame_len:
        raise InputTooShortError(
            f"need at least {frame_len} samples for one frame, got {len(w)}"
        )
    if frame_len > config.fft_size:
        raise ParamError("frame length exceeds fft_size")

    x = w.samples
    emph = np.concatenate(([x[0] - config.pre_emphasis * x[0]], x[1:] - config.pre_emphasis * x[:-1]))
    n_frames = (len(x) - frame_len) // frame_shift + 1
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(n_frames)[:, None]
    frames = emph[idx] * np.hamming(frame_len)

    spectrum = np.abs(np.fft.rfft(frames, n=config.fft_size, axis=1)) ** 2
    mel = spectrum @ _mel_filterbank(config, rate).T
    feats = np.log(np.maximum(mel, config.log_floor)).T  # (n_mels, T)
    if config.mean_normalize:
        feats = feats - feats.mean(axis=1, keepdims=True)
    return feats


def concat_short_utterances(
    manifest: UtteranceManifest,
    min_out_s: float = 5.0,
    short_threshold_s: float = 2.0,
) -> UtteranceManifest:
    """Greedily concatenate short utterances of the same (speaker, genre).

    Utterances shorter than `short_threshold_s` are grouped in manifest order
    and merged into composite rows until each reaches `min_out_s`; a leftover
    group below the minimum still emits one composite row. The composite path
    lists the component paths joined by "|". Total duration is preserved.
    """
    groups: dict[tuple[str, str], list[ManifestRow]] = {}
    out_rows: list[ManifestRow | tuple] = []
    for row in manifest.rows:
        if row.duration_s < short_threshold_s:
            key = (row.speaker_id, row.genre)
            groups.setdefault(key, []).append(row)
            if len(groups[key]) == 1:
                out_rows.append(("group", key))  # placeholder keeps manifest order
        else:
            out_rows.append(row)

    composites: dict[tuple[str, str], list[ManifestRow]] = {}
    for key, members in groups.items():
        merged: list[ManifestRow] = []
        bucket: list[ManifestRow] = []
        total = 0.0
        for row in members:
            bucket.append(row)
            total += row.duration_s
            if total >= min_out_s:
                merged.append(_composite_row(bucket, len(merged)))
                bucket, total = [], 0.0
        if bucket:
            merged.append(_composite_row(bucket, len(merged)))
        composites[key] = merged

    final: list[ManifestRow] = []
    for item in out_rows:
        if isinstance(item, ManifestRow):
            final.append(item)
        else:
            final.extend(composites[item[1]])
    return UtteranceManifest(final)


def _composite_row(members: list[ManifestRow], index: int) -> ManifestRow:
    if len(members) == 1:
        return members[0]
    first = members[0]
    return ManifestRow(
        utt_id=f"{first.utt_id}+cat{index}",
        speaker_id=first.speaker_id,
        genre=first.genre,
        duration_s=float(sum(r.duration_s for r in members)),
        path="|".join(r.path for r in members),
    )


def resample(w: Waveform, target_rate_hz: int) -> Waveform:
    """Bandlimited resampling to a new sample rate."""
    if target_rate_hz < 1:
        raise ParamError("target rate must be positive")
    if target_rate_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    g = math.gcd(target_rate_hz, w.sample_rate_hz)
    out = resample_poly(w.samples, target_rate_hz // g, w.sample_rate_hz // g)
    return Waveform(out, target_rate_hz)


# ---------------------------------------------------------------------------
# 16-bit PCM WAV I/O (mono)


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise FormatError(f"{path}: only mono WAV supported")
            if f.getsampwidth() != 2:
                raise FormatError(f"{path}: only 16-bit PCM supported")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (OSError, wave.Error) as exc:
        raise IoError(f"cannot read WAV {path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(w.sample_rate_hz)
            f.writeframes(pcm.tobytes())
    except (OSError, wave.Error) as exc:
        raise IoError(f"cannot write WAV {path}: {exc}") from exc
