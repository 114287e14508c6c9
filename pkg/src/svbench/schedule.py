"""Two-stage training recipe: configuration, exponential LR schedule and a
deterministic toy trainer over synthetic class-clustered vectors.

Stage I trains from scratch on 2 s segments with margin 0.2; Stage II is
large-margin fine-tuning: 6 s segments, margin 0.5, a short low-LR run with
speed perturbation and the top-k inter-class penalty disabled.

The toy model is a single linear map (input dim -> embedding dim) plus class
centers, trained by full-batch plain gradient descent using the margin-loss
kernels. It exists to exercise the schedules and the fine-tuning contract,
not to model a real extractor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParamError
from .losses import LossParams, loss_from_embeddings

EMBED_DIM = 16


@dataclass
class StageConfig:
    segment_s: float
    margin: float
    scale: float
    epochs: int
    lr_start: float
    lr_end: float
    use_speed_perturb: bool
    use_intertopk: bool
    loss_kind: str = "aam"

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ParamError("lr_end must not exceed lr_start")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ParamError("learning rates must be positive")
        if self.epochs < 0:
            raise ParamError("epochs must be nonnegative")

    @property
    def frame_count(self) -> int:
        """Fbank frames covered by one training segment at 10 ms shift."""
        return int(round(self.segment_s * 100))


def default_stage1() -> StageConfig:
    return StageConfig(
        segment_s=2.0,
        margin=0.2,
        scale=32.0,
        epochs=150,
        lr_start=0.1,
        lr_end=1e-5,
        use_speed_perturb=True,
        use_intertopk=True,
        loss_kind="intertopk",
    )


def default_stage2() -> StageConfig:
    return StageConfig(
        segment_s=6.0,
        margin=0.5,
        scale=32.0,
        epochs=5,
        lr_start=1e-4,
        lr_end=2.5e-5,
        use_speed_perturb=False,
        use_intertopk=False,
        loss_kind="aam",
    )


def lr_at(config: StageConfig, step: int, total_steps: int) -> float:
    """Geometric interpolation between the configured LR endpoints."""
    if total_steps < 1 or not (0 <= step <= total_steps):
        raise ParamError(f"step {step} out of range for {total_steps} total steps")
    return config.lr_start * (config.lr_end / config.lr_start) ** (step / total_steps)


@dataclass
class ToyDatasetSpec:
    n_classes: int = 4
    dim: int = 8
    samples_per_class: int = 16
    within_class_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.dim, self.samples_per_class) < 1:
            raise ParamError("dataset sizes must be positive")
        if self.within_class_std <= 0:
            raise ParamError("within_class_std must be positive")


def make_toy_dataset(spec: ToyDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class-clustered vectors: unit-ish random centers plus Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.n_classes, spec.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    X = np.repeat(centers, spec.samples_per_class, axis=0)
    X = X + spec.within_class_std * rng.standard_normal(X.shape)
    y = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    return X, y


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss: float
    lr: float
    margin_stat: float


@dataclass
class TrainingReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    weight: np.ndarray = None
    centers: np.ndarray = None
    margin_after_stage1: float = float("nan")
    margin_after_stage2: float = float("nan")

    def losses(self, stage: int | None = None) -> list[float]:
        return [e.loss for e in self.epochs if stage is None or e.stage == stage]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "lr", "margin_stat"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.loss), repr(e.lr), repr(e.margin_stat)])

    def format_table(self) -> str:
        lines = [f"{'stage':>5} {'epoch':>5} {'loss':>12} {'lr':>12} {'margin':>10}"]
        for e in self.epochs:
            lines.append(
                f"{e.stage:>5} {e.epoch:>5} {e.loss:>12.6f} {e.lr:>12.6g} {e.margin_stat:>10.6f}"
            )
        return "\n".join(lines)


def _loss_params(cfg: StageConfig, n_classes: int) -> tuple[LossParams, str]:
    kind = cfg.loss_kind
    if kind == "intertopk" and not cfg.use_intertopk:
        kind = "aam"
    params = LossParams(
        scale_s=cfg.scale,
        margin_m=cfg.margin,
        topk_k=min(5, max(1, n_classes - 1)),
    )
    return params, kind


def mean_cosine_margin(X: np.ndarray, W: np.ndarray, centers: np.ndarray, y: np.ndarray) -> float:
    """E[cos(theta_y) - max_{j != y} cos(theta_j)] over the dataset."""
    emb = X @ W
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    c = centers if centers.ndim == 2 else centers.reshape(-1, centers.shape[-1])
    c = c / np.linalg.norm(c, axis=1, keepdims=True)
    cos = emb @ c.T
    if centers.ndim == 3:
        cos = cos.reshape(len(X), centers.shape[0], centers.shape[1]).max(axis=2)
    rows = np.arange(len(X))
    target = cos[rows, y]
    masked = cos.copy()
    masked[rows, y] = -np.inf
    return float(np.mean(target - masked.max(axis=1)))


def _run_stage(X, y, W, centers, cfg: StageConfig, stage: int, report: TrainingReport):
    params, kind = _loss_params(cfg, centers.shape[0])
    for epoch in range(cfg.epochs):
        out = loss_from_embeddings(X @ W, centers, y, params, kind)
        if not np.isfinite(out.loss):
            raise DivergenceError(f"loss diverged at stage {stage} epoch {epoch}")
        lr = lr_at(cfg, epoch, max(1, cfg.epochs))
        W = W - lr * (X.T @ out.grad_embeddings)
        centers = centers - lr * out.grad_centers
        report.epochs.append(
            EpochRecord(stage, epoch, out.loss, lr, mean_cosine_margin(X, W, centers, y))
        )
    return W, centers


def train_toy(
    data: ToyDatasetSpec,
    stage1: StageConfig,
    stage2: StageConfig,
    seed: int = 0,
    sub_centers: int = 1,
) -> TrainingReport:
    """Run the two-stage recipe on a synthetic dataset; deterministic per seed."""
    X, y = make_toy_dataset(data)
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((data.dim, EMBED_DIM)) / np.sqrt(data.dim)
    if sub_centers > 1:
        centers = rng.standard_normal((data.n_classes, sub_centers, EMBED_DIM))
    else:
        centers = rng.standard_normal((data.n_classes, EMBED_DIM))

    report = TrainingReport()
    W, centers = _run_stage(X, y, W, centers, stage1, 1, report)
    report.margin_after_stage1 = mean_cosine_margin(X, W, centers, y)
    W, centers = _run_stage(X, y, W, centers, stage2, 2, report)
    report.margin_after_stage2 = mean_cosine_margin(X, W, centers, y)
    report.weight = W
    report.centers = centers
    return report
