"""Figure rendering for the CLI report paths (matplotlib, file output only)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import LabeledScores  # noqa: E402


def save_score_histogram(scores: LabeledScores, path, threshold: float | None = None) -> None:
    """Overlaid target/nontarget score histograms, optional threshold marker."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(scores.nontarget_scores, bins=60, alpha=0.6, density=True, label="nontarget")
    ax.hist(scores.target_scores, bins=60, alpha=0.6, density=True, label="target")
    if threshold is not None:
        ax.axvline(threshold, color="k", linestyle="--", linewidth=1, label="threshold")
    ax.set_xlabel("score")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(report, path) -> None:
    """Loss and margin-statistic curves over epochs, stages separated."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    steps = list(range(len(report.epochs)))
    ax1.plot(steps, [e.loss for e in report.epochs], "C0-")
    ax2.plot(steps, [e.margin_stat for e in report.epochs], "C1-")
    boundary = len([e for e in report.epochs if e.stage == 1])
    if 0 < boundary < len(report.epochs):
        for ax in (ax1, ax2):
            ax.axvline(boundary - 0.5, color="k", linestyle=":", linewidth=1)
    ax1.set_ylabel("mean loss")
    ax1.set_yscale("log")
    ax2.set_ylabel("mean cosine margin")
    ax2.set_xlabel("epoch (stage boundary dotted)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
