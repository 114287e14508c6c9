"""Verification metrics: ROC operating points, EER and detection cost.

Conventions (fixed so that independent oracles agree):
  - a trial is accepted when score >= threshold, so nontargets exactly at
    the threshold count as false accepts
  - std/means use the realized score multisets, thresholds sweep the sorted
    distinct scores plus -inf/+inf sentinels
  - minDCF is normalized by min(c_miss * p_target, c_fa * (1 - p_target))
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyClassError, FormatError


@dataclass(frozen=True)
class LabeledScores:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "target_scores", np.asarray(self.target_scores, dtype=np.float64)
        )
        object.__setattr__(
            self, "nontarget_scores", np.asarray(self.nontarget_scores, dtype=np.float64)
        )
        if not (np.all(np.isfinite(self.target_scores)) and np.all(np.isfinite(self.nontarget_scores))):
            raise FormatError("scores must be finite")

    def require_nonempty(self):
        if self.target_scores.size == 0 or self.nontarget_scores.size == 0:
            raise EmptyClassError("need at least one target and one nontarget score")


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.p_target < 1.0):
            raise FormatError(f"p_target must be in (0,1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise FormatError("costs must be positive")

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))

    @property
    def bayes_threshold(self) -> float:
        """Optimal decision threshold for calibrated log-likelihood-ratio scores."""
        return math.log(self.c_fa * (1.0 - self.p_target) / (self.c_miss * self.p_target))


def _rates_at(scores: LabeledScores, threshold: float) -> tuple[float, float]:
    p_miss = float(np.count_nonzero(scores.target_scores < threshold)) / scores.target_scores.size
    p_fa = float(np.count_nonzero(scores.nontarget_scores >= threshold)) / scores.nontarget_scores.size
    return p_miss, p_fa


def roc_points(scores: LabeledScores) -> list[tuple[float, float, float]]:
    """All distinct ROC operating points as (threshold, p_miss, p_fa).

    Thresholds are the sorted distinct score values plus -inf/+inf sentinels;
    consecutive thresholds realizing the same (p_miss, p_fa) point are merged
    keeping the smallest threshold.
    """
    scores.require_nonempty()
    thresholds = np.concatenate(
        (
            [-np.inf],
            np.unique(np.concatenate((scores.target_scores, scores.nontarget_scores))),
            [np.inf],
        )
    )
    points = []
    for t in thresholds:
        p_miss, p_fa = _rates_at(scores, t)
        if points and points[-1][1] == p_miss and points[-1][2] == p_fa:
            continue
        points.append((float(t), p_miss, p_fa))
    return points


def eer(scores: LabeledScores) -> float:
    """Equal error rate via the ROC sweep.

    When no realized threshold has p_miss == p_fa, linearly interpolate
    between the two adjacent ROC points bracketing the sign change of
    (p_miss - p_fa).
    """
    points = roc_points(scores)
    prev = None
    for _, p_miss, p_fa in points:
        diff = p_miss - p_fa
        if diff == 0.0:
            return p_miss
        if diff > 0.0:
            if prev is None:
                return p_miss  # degenerate: first point already past the crossing
            pm1, pf1 = prev
            # crossing of the two linear segments between the bracketing points
            denom = (p_miss - pm1) - (p_fa - pf1)
            alpha = (pf1 - pm1) / denom
            return pm1 + alpha * (p_miss - pm1)
        prev = (p_miss, p_fa)
    return points[-1][1]


def _dcf(p_miss: float, p_fa: float, params: DcfParams) -> float:
    cost = params.c_miss * p_miss * params.p_target + params.c_fa * p_fa * (1.0 - params.p_target)
    return cost / params.normalizer


def min_dcf(scores: LabeledScores, params: DcfParams) -> tuple[float, float]:
    """Minimum normalized detection cost over ROC thresholds.

    Returns (min_dcf, minimizing threshold); ties go to the smallest threshold.
    """
    best_cost = math.inf
    best_t = None
    for t, p_miss, p_fa in roc_points(scores):
        cost = _dcf(p_miss, p_fa, params)
        if cost < best_cost:
            best_cost = cost
            best_t = t
    return best_cost, best_t


def actual_dcf(scores: LabeledScores, params: DcfParams, threshold: float) -> float:
    """Normalized detection cost at a fixed decision threshold."""
    scores.require_nonempty()
    p_miss, p_fa = _rates_at(scores, threshold)
    return _dcf(p_miss, p_fa, params)


def labeled_scores_from_records(records, trials) -> LabeledScores:
    """Join score records with labeled trials into a LabeledScores split."""
    from .datamodel import TARGET

    by_key = {r.key: r.score for r in records}
    target, nontarget = [], []
    for t in trials:
        if t.label is None:
            raise FormatError(f"trial {t.key} has no label")
        if t.key not in by_key:
            raise FormatError(f"no score for trial {t.key}")
        (target if t.label == TARGET else nontarget).append(by_key[t.key])
    return LabeledScores(np.array(target), np.array(nontarget))
