"""Synthetic embedding generator and desk-scale scoring-chain experiment.

The generator mimics the statistics the back end exploits: per-speaker
Gaussian centers, per-utterance noise whose std shrinks with a sampled
"duration", and a channel offset drawn from a small set of channel clusters
shared by every population of a run. Channel offsets give as-norm something
to normalize away; duration-dependent noise plus unnormalized magnitudes
give the quality-aware calibration real side information.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backend import (
    AsNormParams,
    Cohort,
    apply_calibration,
    as_norm_scores,
    fit_calibration,
    qmf_extract,
    score_trials,
)
from .datamodel import Embedding, EmbeddingStore, ScoreRecord, Trial, TARGET, NONTARGET
from .metrics import (
    DcfParams,
    actual_dcf,
    eer,
    labeled_scores_from_records,
    min_dcf,
)


@dataclass
class SyntheticConfig:
    dim: int = 64
    n_speakers: int = 40
    utts_per_speaker: int = 25
    n_channels: int = 5
    duration_lo_s: float = 2.0
    duration_hi_s: float = 20.0
    center_scale: float = 1.0
    channel_scale: float = 0.75
    noise_base: float = 2.0
    n_trials: int = 20000
    target_fraction: float = 0.3
    cohort_speakers: int = 150


@dataclass
class SyntheticPopulation:
    store: EmbeddingStore
    durations: dict[str, float]
    speaker_map: dict[str, str]


def generate_population(
    rng: np.random.Generator,
    cfg: SyntheticConfig,
    channels: np.ndarray,
    prefix: str,
) -> SyntheticPopulation:
    store = EmbeddingStore(cfg.dim)
    durations: dict[str, float] = {}
    speaker_map: dict[str, str] = {}
    for s in range(cfg.n_speakers):
        center = cfg.center_scale * rng.standard_normal(cfg.dim)
        for u in range(cfg.utts_per_speaker):
            dur = rng.uniform(cfg.duration_lo_s, cfg.duration_hi_s)
            sigma = cfg.noise_base / np.sqrt(dur)
            ch = rng.integers(cfg.n_channels)
            vec = center + channels[ch] + sigma * rng.standard_normal(cfg.dim)
            utt_id = f"{prefix}s{s:03d}u{u:03d}"
            store.add(Embedding(utt_id, vec))
            durations[utt_id] = float(dur)
            speaker_map[utt_id] = f"{prefix}s{s:03d}"
    return SyntheticPopulation(store, durations, speaker_map)


def sample_trials(
    rng: np.random.Generator,
    pop: SyntheticPopulation,
    n_trials: int,
    target_fraction: float,
) -> list[Trial]:
    by_speaker: dict[str, list[str]] = {}
    for utt_id in pop.store.ids():
        by_speaker.setdefault(pop.speaker_map[utt_id], []).append(utt_id)
    speakers = sorted(by_speaker)
    trials = []
    for _ in range(n_trials):
        if rng.random() < target_fraction:
            spk = speakers[rng.integers(len(speakers))]
            a, b = rng.choice(len(by_speaker[spk]), size=2, replace=False)
            trials.append(Trial(by_speaker[spk][a], by_speaker[spk][b], TARGET))
        else:
            i, j = rng.choice(len(speakers), size=2, replace=False)
            ea = by_speaker[speakers[i]]
            eb = by_speaker[speakers[j]]
            trials.append(
                Trial(ea[rng.integers(len(ea))], eb[rng.integers(len(eb))], NONTARGET)
            )
    return trials


def build_synthetic_cohort(
    rng: np.random.Generator, cfg: SyntheticConfig, channels: np.ndarray
) -> Cohort:
    """Per-speaker mean vectors from a held-out training population."""
    train_cfg = replace(cfg, n_speakers=cfg.cohort_speakers, utts_per_speaker=5)
    pop = generate_population(rng, train_cfg, channels, "coh_")
    by_speaker: dict[str, list[str]] = {}
    for u, s in pop.speaker_map.items():
        by_speaker.setdefault(s, []).append(u)
    speakers = sorted(by_speaker)
    vectors = np.stack(
        [np.mean([pop.store.vector(u) for u in by_speaker[s]], axis=0) for s in speakers]
    )
    return Cohort(speakers, vectors)


@dataclass
class ChainResult:
    eer_cosine: float
    eer_asnorm: float
    adcf_asnorm: float
    adcf_calibrated: float
    mindcf_cosine: float
    mindcf_asnorm: float


def run_scoring_chain(
    seed: int,
    cfg: SyntheticConfig | None = None,
    dcf: DcfParams | None = None,
    top_n: int = 75,
) -> ChainResult:
    """Score a synthetic trial set through cosine -> as-norm -> calibration
    and report the metrics of each stage."""
    cfg = cfg or SyntheticConfig()
    dcf = dcf or DcfParams(p_target=0.5)
    rng = np.random.default_rng(seed)

    channels = cfg.channel_scale * rng.standard_normal((cfg.n_channels, cfg.dim))
    cohort = build_synthetic_cohort(rng, cfg, channels)
    params = AsNormParams(top_n=min(top_n, len(cohort)))

    eval_pop = generate_population(rng, cfg, channels, "ev_")
    calib_pop = generate_population(rng, cfg, channels, "cal_")

    eval_trials = sample_trials(rng, eval_pop, cfg.n_trials, cfg.target_fraction)
    calib_trials = sample_trials(rng, calib_pop, cfg.n_trials // 2, 0.5)

    raw = score_trials(eval_pop.store, eval_trials)
    normed = as_norm_scores(raw, eval_pop.store, cohort, params)

    raw_split = labeled_scores_from_records(raw, eval_trials)
    norm_split = labeled_scores_from_records(normed, eval_trials)

    # calibration trained on the held-out population over as-normed scores,
    # then applied to the as-normed eval scores (canonical chain order)
    calib_raw = score_trials(calib_pop.store, calib_trials)
    calib_normed = as_norm_scores(calib_raw, calib_pop.store, cohort, params)
    cache: dict[str, tuple[float, float]] = {}
    feats = [
        qmf_extract(t, r.score, calib_pop.store, calib_pop.durations, cohort, params, cache)
        for t, r in zip(calib_trials, calib_normed)
    ]
    model = fit_calibration(feats, [t.label for t in calib_trials])

    calibrated = []
    for t, r in zip(eval_trials, normed):
        q = qmf_extract(t, r.score, eval_pop.store, eval_pop.durations, cohort, params, cache)
        calibrated.append(ScoreRecord(t.enroll_id, t.test_id, apply_calibration(model, q)))
    calib_split = labeled_scores_from_records(calibrated, eval_trials)

    bayes_t = dcf.bayes_threshold
    return ChainResult(
        eer_cosine=eer(raw_split),
        eer_asnorm=eer(norm_split),
        adcf_asnorm=actual_dcf(norm_split, dcf, bayes_t),
        adcf_calibrated=actual_dcf(calib_split, dcf, bayes_t),
        mindcf_cosine=min_dcf(raw_split, dcf)[0],
        mindcf_asnorm=min_dcf(norm_split, dcf)[0],
    )
