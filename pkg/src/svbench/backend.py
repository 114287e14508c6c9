"""Back-end scoring chain: cosine scoring, adaptive score normalization with
a speaker-averaged imposter cohort, quality-aware logistic calibration,
linear score fusion and enrollment averaging.

QMF feature ordering used by the calibration model (fixed, also written as
the first line of model files):
    raw_score, enroll_magnitude, test_magnitude,
    log_enroll_duration, log_test_duration,
    enroll_cohort_mean, test_cohort_mean
Durations are stored in seconds on QmfFeatures and log-transformed inside
fit/apply.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy.optimize import minimize

from .datamodel import (
    Embedding,
    EmbeddingStore,
    ScoreRecord,
    Trial,
    UtteranceManifest,
    format_score,
    TARGET,
    NONTARGET,
)
from .errors import (
    DegenerateCohortError,
    DegenerateEmbeddingError,
    DimensionError,
    EmptyEnrollmentError,
    FormatError,
    InfeasibleSamplingError,
    MissingIdError,
    SingleClassError,
    TrialMismatchError,
    WeightError,
)
from .metrics import DcfParams, LabeledScores, min_dcf

QMF_FEATURE_NAMES = (
    "raw_score",
    "enroll_magnitude",
    "test_magnitude",
    "log_enroll_duration",
    "log_test_duration",
    "enroll_cohort_mean",
    "test_cohort_mean",
)


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64)


def cosine_score(enroll, test) -> float:
    e, t = _vec(enroll), _vec(test)
    if e.shape != t.shape:
        raise DimensionError(f"dimension mismatch: {e.shape[0]} vs {t.shape[0]}")
    ne, nt = np.linalg.norm(e), np.linalg.norm(t)
    if ne == 0.0 or nt == 0.0:
        raise DegenerateEmbeddingError("cosine undefined for zero-norm embedding")
    return float(np.dot(e, t) / (ne * nt))


@dataclass
class Cohort:
    speaker_ids: list[str]
    vectors: np.ndarray  # (n_speakers, dim) per-speaker mean embeddings

    def __len__(self):
        return len(self.speaker_ids)

    def to_store(self) -> EmbeddingStore:
        store = EmbeddingStore(self.vectors.shape[1])
        for sid, v in zip(self.speaker_ids, self.vectors):
            store.add(Embedding(sid, v))
        return store

    @classmethod
    def from_store(cls, store: EmbeddingStore) -> "Cohort":
        return cls(store.ids(), store.matrix())


@dataclass
class AsNormParams:
    top_n: int = 600

    def __post_init__(self):
        if self.top_n < 1:
            raise FormatError("top_n must be positive")


def build_cohort(store: EmbeddingStore, speaker_map: dict[str, str], size: int, seed: int) -> Cohort:
    """Per-speaker mean vectors; uniformly subsampled to `size` speakers when
    there are more, deterministic for a fixed seed."""
    if size < 1:
        raise FormatError("cohort size must be positive")
    by_speaker: dict[str, list[np.ndarray]] = {}
    for utt_id in sorted(speaker_map):
        spk = speaker_map[utt_id]
        by_speaker.setdefault(spk, []).append(store.vector(utt_id))
    speakers = sorted(by_speaker)
    if len(speakers) > size:
        rng = random.Random(seed)
        speakers = sorted(rng.sample(speakers, size))
    vectors = np.stack([np.mean(by_speaker[s], axis=0) for s in speakers])
    return Cohort(speakers, vectors)


def _topn_stats(vec: np.ndarray, cohort: Cohort, top_n: int) -> tuple[float, float]:
    """Mean and population std of the top_n largest cohort cosines."""
    norms = np.linalg.norm(cohort.vectors, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("zero-norm cohort vector")
    vn = np.linalg.norm(vec)
    if vn == 0.0:
        raise DegenerateEmbeddingError("zero-norm embedding")
    scores = (cohort.vectors @ vec) / (norms * vn)
    top = np.sort(scores)[-top_n:]
    mu = float(np.mean(top))
    sigma = float(np.std(top))  # population std
    if sigma == 0.0:
        raise DegenerateCohortError("zero std in top-n cohort scores")
    return mu, sigma


def as_norm(raw: float, enroll, test, cohort: Cohort, params: AsNormParams) -> float:
    """Symmetric adaptive s-norm with per-side top-n cohort statistics."""
    if len(cohort) == 0:
        raise DegenerateCohortError("empty cohort")
    if params.top_n > len(cohort):
        raise FormatError(f"top_n={params.top_n} exceeds cohort size {len(cohort)}")
    mu_e, sigma_e = _topn_stats(_vec(enroll), cohort, params.top_n)
    mu_t, sigma_t = _topn_stats(_vec(test), cohort, params.top_n)
    return 0.5 * ((raw - mu_e) / sigma_e + (raw - mu_t) / sigma_t)


@dataclass
class QmfFeatures:
    raw_score: float
    enroll_magnitude: float
    test_magnitude: float
    enroll_duration_s: float
    test_duration_s: float
    enroll_cohort_mean: float
    test_cohort_mean: float

    def feature_vector(self) -> np.ndarray:
        return np.array(
            [
                self.raw_score,
                self.enroll_magnitude,
                self.test_magnitude,
                math.log(self.enroll_duration_s),
                math.log(self.test_duration_s),
                self.enroll_cohort_mean,
                self.test_cohort_mean,
            ]
        )


def as_norm_scores(
    records, store: EmbeddingStore, cohort: Cohort, params: AsNormParams
) -> list[ScoreRecord]:
    """Apply as_norm to a whole score list, caching per-utterance cohort
    statistics (same formula as as_norm, evaluated once per unique id)."""
    if len(cohort) == 0:
        raise DegenerateCohortError("empty cohort")
    if params.top_n > len(cohort):
        raise FormatError(f"top_n={params.top_n} exceeds cohort size {len(cohort)}")
    stats: dict[str, tuple[float, float]] = {}

    def stat(emb_id: str) -> tuple[float, float]:
        if emb_id not in stats:
            stats[emb_id] = _topn_stats(store.vector(emb_id), cohort, params.top_n)
        return stats[emb_id]

    out = []
    for r in records:
        mu_e, sigma_e = stat(r.enroll_id)
        mu_t, sigma_t = stat(r.test_id)
        normed = 0.5 * ((r.score - mu_e) / sigma_e + (r.score - mu_t) / sigma_t)
        out.append(ScoreRecord(r.enroll_id, r.test_id, normed))
    return out


def qmf_extract(
    trial: Trial,
    raw: float,
    store: EmbeddingStore,
    durations: dict[str, float],
    cohort: Cohort,
    params: AsNormParams,
    stats_cache: dict[str, tuple[float, float]] | None = None,
) -> QmfFeatures:
    enroll = store.get(trial.enroll_id)
    test = store.get(trial.test_id)
    for utt_id in (trial.enroll_id, trial.test_id):
        if utt_id not in durations:
            raise MissingIdError(f"no duration for {utt_id!r}")

    def stats(emb: Embedding) -> tuple[float, float]:
        if stats_cache is None:
            return _topn_stats(emb.vector, cohort, params.top_n)
        if emb.id not in stats_cache:
            stats_cache[emb.id] = _topn_stats(emb.vector, cohort, params.top_n)
        return stats_cache[emb.id]

    mu_e, _ = stats(enroll)
    mu_t, _ = stats(test)
    return QmfFeatures(
        raw_score=raw,
        enroll_magnitude=enroll.magnitude,
        test_magnitude=test.magnitude,
        enroll_duration_s=durations[trial.enroll_id],
        test_duration_s=durations[trial.test_id],
        enroll_cohort_mean=mu_e,
        test_cohort_mean=mu_t,
    )


@dataclass
class CalibrationModel:
    feature_names: tuple[str, ...]
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise FormatError("calibration model must be finite")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(self.feature_names) + "\n")
            f.write(format_score(self.bias) + "\n")
            f.write(" ".join(format_score(w) for w in self.weights) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if len(lines) < 3:
            raise FormatError(f"{path}: calibration model needs 3 lines")
        names = tuple(lines[0].split(","))
        try:
            bias = float(lines[1])
            weights = np.array([float(v) for v in lines[2].split(" ")])
        except ValueError as exc:
            raise FormatError(f"{path}: bad number in calibration model") from exc
        if len(weights) != len(names):
            raise FormatError(f"{path}: weight count != feature count")
        return cls(names, weights, bias)


def _logistic_objective(wb, X, y, l2):
    w, b = wb[:-1], wb[-1]
    z = X @ w + b
    # y in {0,1}; mean logistic loss, stable formulation
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
    p = 1.0 / (1.0 + np.exp(-z))
    g = (p - y) / len(y)
    grad = np.concatenate((X.T @ g + l2 * w, [g.sum()]))
    return loss, grad


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1e-6) -> tuple[np.ndarray, float]:
    """Regularized logistic regression in standardized feature space, with
    weights mapped back to raw-feature space. Converges to gradient norm
    <= 1e-8 (Newton polish after L-BFGS)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise FormatError("non-finite feature value")
    if y.min() == y.max():
        raise SingleClassError("need both target and nontarget examples")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    active = sd > 0.0
    Z = np.zeros_like(X)
    Z[:, active] = (X[:, active] - mu[active]) / sd[active]

    wb0 = np.zeros(X.shape[1] + 1)
    res = minimize(
        _logistic_objective,
        wb0,
        args=(Z, y, l2),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-16},
    )
    wb = res.x
    # Newton polish to hit the stated gradient-norm tolerance
    for _ in range(200):
        loss, grad = _logistic_objective(wb, Z, y, l2)
        if np.linalg.norm(grad) <= 1e-8:
            break
        w, b = wb[:-1], wb[-1]
        z = Z @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        s = p * (1.0 - p) / len(y)
        d = Z.shape[1]
        H = np.zeros((d + 1, d + 1))
        H[:d, :d] = Z.T @ (Z * s[:, None]) + l2 * np.eye(d)
        H[:d, d] = H[d, :d] = Z.T @ s
        H[d, d] = s.sum()
        step = np.linalg.solve(H + 1e-12 * np.eye(d + 1), grad)
        # backtracking in case of overshoot on near-separable data
        t = 1.0
        while t > 1e-8:
            cand = wb - t * step
            if _logistic_objective(cand, Z, y, l2)[0] <= loss:
                wb = cand
                break
            t *= 0.5
        else:
            break

    w_std, b_std = wb[:-1], wb[-1]
    weights = np.zeros(X.shape[1])
    weights[active] = w_std[active] / sd[active]
    bias = float(b_std - np.dot(weights[active], mu[active]))
    return weights, bias


def fit_calibration(features, labels) -> CalibrationModel:
    """Fit the linear log-likelihood-ratio calibration model on QMF features."""
    X = np.stack([q.feature_vector() for q in features])
    y = np.array([1.0 if lab == TARGET else 0.0 for lab in labels])
    for lab in labels:
        if lab not in (TARGET, NONTARGET):
            raise FormatError(f"bad label {lab!r}")
    weights, bias = fit_logistic(X, y)
    return CalibrationModel(QMF_FEATURE_NAMES, weights, bias)


def apply_calibration(model: CalibrationModel, features: QmfFeatures) -> float:
    return float(np.dot(model.weights, features.feature_vector()) + model.bias)


def calibration_loss(model: CalibrationModel, features, labels) -> float:
    """Mean logistic loss of the model on a labeled feature set."""
    z = np.array([apply_calibration(model, q) for q in features])
    y = np.array([1.0 if lab == TARGET else 0.0 for lab in labels])
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


# ---------------------------------------------------------------------------
# Fusion


def _znorm_scores(records) -> dict[tuple[str, str], float]:
    values = np.array([r.score for r in records])
    mu = float(values.mean())
    sd = float(values.std())
    if sd == 0.0:
        return {r.key: 0.0 for r in records}
    return {r.key: (r.score - mu) / sd for r in records}


def fuse(score_sets, weights) -> list[ScoreRecord]:
    """Weighted sum of per-system z-normalized scores over identical trial keys."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(score_sets) != len(weights):
        raise WeightError("one weight per score set required")
    if np.any(weights < 0):
        raise WeightError("weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise WeightError(f"weights sum to {weights.sum()}, expected 1")
    keys = [r.key for r in score_sets[0]]
    key_set = set(keys)
    if len(key_set) != len(keys):
        raise TrialMismatchError("duplicate trial key in score set 0")
    normed = []
    for i, records in enumerate(score_sets):
        if {r.key for r in records} != key_set:
            raise TrialMismatchError(f"score set {i} covers different trials")
        normed.append(_znorm_scores(records))
    out = []
    for key in keys:
        fused = float(sum(w * z[key] for w, z in zip(weights, normed)))
        out.append(ScoreRecord(key[0], key[1], fused))
    return out


def _simplex_grid(n_systems: int, steps: int):
    for combo in combinations_with_replacement(range(n_systems), steps):
        counts = np.bincount(np.array(combo), minlength=n_systems)
        yield counts / steps


def search_fusion_weights(score_sets, labeled_trials, params: DcfParams, grid_step: float):
    """Exhaustive simplex grid search minimizing minDCF of the fused scores.

    Ties break toward the uniform weight vector (min L2 distance), then
    lexicographically for determinism.
    """
    if not score_sets:
        raise WeightError("need at least one score set")
    if not (0.0 < grid_step <= 1.0):
        raise WeightError("grid_step must be in (0, 1]")
    n = len(score_sets)
    if n == 1:
        return np.array([1.0])
    steps = max(1, round(1.0 / grid_step))
    label_by_key = {t.key: t.label for t in labeled_trials}
    uniform = np.full(n, 1.0 / n)

    best = None
    for w in _simplex_grid(n, steps):
        fused = fuse(score_sets, w)
        target = [r.score for r in fused if label_by_key[r.key] == TARGET]
        nontarget = [r.score for r in fused if label_by_key[r.key] == NONTARGET]
        cost, _ = min_dcf(LabeledScores(np.array(target), np.array(nontarget)), params)
        key = (cost, float(np.sum((w - uniform) ** 2)), tuple(w))
        if best is None or key < best[0]:
            best = (key, w)
    return best[1]


def average_enrollment(store: EmbeddingStore, enroll_map: dict[str, list[str]]) -> EmbeddingStore:
    """One arithmetic-mean embedding per enrollment speaker; magnitude is
    retained (no renormalization) since it feeds the QMF features."""
    out = EmbeddingStore(store.dimension)
    for speaker in enroll_map:
        utts = enroll_map[speaker]
        if not utts:
            raise EmptyEnrollmentError(f"speaker {speaker!r} has no utterances")
        mean = np.mean([store.vector(u) for u in utts], axis=0)
        out.add(Embedding(speaker, mean))
    return out


def build_calibration_trials(
    manifest: UtteranceManifest,
    n_pairs: int,
    target_fraction: float,
    seed: int,
) -> list[Trial]:
    """Sample a labeled calibration trial list: round(target_fraction*n_pairs)
    same-speaker pairs, the rest cross-speaker, without pair repetition,
    with enroll utterances stratified over duration quartiles."""
    if n_pairs < 1:
        raise InfeasibleSamplingError("n_pairs must be positive")
    if not (0.0 < target_fraction < 1.0):
        raise InfeasibleSamplingError("target_fraction must be in (0,1)")
    rows = manifest.rows
    speakers = sorted({r.speaker_id for r in rows})
    if len(speakers) < 2:
        raise InfeasibleSamplingError("need at least two speakers")

    by_speaker: dict[str, list[str]] = {}
    for r in rows:
        by_speaker.setdefault(r.speaker_id, []).append(r.utt_id)
    speaker_of = manifest.speaker_map()

    n_target = round(target_fraction * n_pairs)
    n_nontarget = n_pairs - n_target
    if n_target > 0 and not any(len(v) >= 2 for v in by_speaker.values()):
        raise InfeasibleSamplingError("no speaker has two utterances for target pairs")

    # duration quartiles of the manifest; each contributes enroll utterances
    order = sorted(range(len(rows)), key=lambda i: (rows[i].duration_s, rows[i].utt_id))
    quartiles = [
        [rows[i].utt_id for i in chunk] for chunk in np.array_split(order, 4) if len(chunk)
    ]

    rng = random.Random(seed)
    labels = [TARGET] * n_target + [NONTARGET] * n_nontarget
    rng.shuffle(labels)

    used: set[tuple[str, str]] = set()
    trials = []
    all_utts = [r.utt_id for r in rows]
    for i, label in enumerate(labels):
        bucket = quartiles[i % len(quartiles)]
        for _ in range(20000):
            enroll = rng.choice(bucket)
            spk = speaker_of[enroll]
            if label == TARGET:
                candidates = by_speaker[spk]
                if len(candidates) < 2:
                    continue
                test = rng.choice(candidates)
                if test == enroll:
                    continue
            else:
                test = rng.choice(all_utts)
                if speaker_of[test] == spk:
                    continue
            if (enroll, test) in used:
                continue
            used.add((enroll, test))
            trials.append(Trial(enroll, test, label))
            break
        else:
            raise InfeasibleSamplingError(
                f"could not realize pair {i + 1}/{n_pairs} without repetition"
            )
    return trials


def score_trials(store: EmbeddingStore, trials, n_threads: int = 1) -> list[ScoreRecord]:
    """Cosine-score a trial list; output order follows the input order."""
    def one(t: Trial) -> ScoreRecord:
        return ScoreRecord(t.enroll_id, t.test_id, cosine_score(store.get(t.enroll_id), store.get(t.test_id)))

    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            return list(ex.map(one, trials))
    return [one(t) for t in trials]
