"""Margin-softmax loss kernels over cosine-logit batches.

All kernels consume cosines between embeddings and class centers (shape
B x N, or B x N x K with sub-centers), produce the batch-mean cross-entropy
and the analytic gradient with respect to the input cosines. A separate
composition op chains the gradients through embedding/center row
normalization for toy training.

Supported kinds:
  am            target logit s*(cos - m)
  aam           target logit s*cos(theta + m)
  subcenter_aam aam after max-reduction over K sub-centers per class
  intertopk     aam plus extra margin on the k hardest non-target classes
  hem           aam plus extra margin m' on non-target classes whose cosine
                exceeds the margined target cosine (hard example mining)

Selection conditions (top-k membership, the hem switch, sub-center argmax)
are treated as locally constant when differentiating; ties break toward the
lower index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEmbeddingError, FormatError, ParamError

_COS_CLAMP = 1.0 - 1e-12

KINDS = ("am", "aam", "subcenter_aam", "intertopk", "hem")


@dataclass
class LossParams:
    scale_s: float = 32.0
    margin_m: float = 0.2
    hem_margin: float = 0.1
    topk_k: int = 5
    topk_margin: float = 0.06

    def __post_init__(self):
        if self.scale_s <= 0:
            raise ParamError("scale_s must be positive")
        if self.margin_m < 0 or self.hem_margin < 0 or self.topk_margin < 0:
            raise ParamError("margins must be nonnegative")
        if self.topk_k < 1:
            raise ParamError("topk_k must be positive")


@dataclass
class CosineLogitBatch:
    values: np.ndarray  # (B, N) cosines
    labels: np.ndarray  # (B,) class indices

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise FormatError("values must be B x N")
        b, n = self.values.shape
        if b < 1 or n < 1:
            raise FormatError("batch and class count must be >= 1")
        if self.labels.shape != (b,):
            raise FormatError("labels must have one entry per example")
        if np.any(self.labels < 0) or np.any(self.labels >= n):
            raise FormatError("label out of range")
        if np.any(np.abs(self.values) > 1.0 + 1e-9):
            raise FormatError("cosines must lie in [-1, 1]")


@dataclass
class SubCenterLogitBatch:
    values: np.ndarray  # (B, N, K)
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 3:
            raise FormatError("values must be B x N x K")


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray  # d loss / d cosine, same shape as input


@dataclass
class EmbeddingLossOutput:
    loss: float
    grad_embeddings: np.ndarray
    grad_centers: np.ndarray
    cosines: np.ndarray = field(repr=False, default=None)


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and gradient wrt logits for integer labels."""
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1)
    log_probs = shifted - np.log(denom)[:, None]
    loss = -float(np.mean(log_probs[np.arange(b), labels]))
    grad = exp / denom[:, None]
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


def _clamped(c: np.ndarray) -> np.ndarray:
    return np.clip(c, -_COS_CLAMP, _COS_CLAMP)


def _cos_plus_margin(c: np.ndarray, m: float) -> tuple[np.ndarray, np.ndarray]:
    """cos(arccos(c) + m) and its derivative, with c clamped away from +-1."""
    cc = _clamped(c)
    theta = np.arccos(cc)
    value = np.cos(theta + m)
    deriv = np.sin(theta + m) / np.sqrt(1.0 - cc * cc)
    return value, deriv


def _cos_minus_margin(c: np.ndarray, m: float) -> tuple[np.ndarray, np.ndarray]:
    cc = _clamped(c)
    theta = np.arccos(cc)
    value = np.cos(theta - m)
    deriv = np.sin(theta - m) / np.sqrt(1.0 - cc * cc)
    return value, deriv


def am_loss(batch: CosineLogitBatch, params: LossParams) -> LossOutput:
    b, n = batch.values.shape
    rows = np.arange(b)
    logits = params.scale_s * batch.values.copy()
    logits[rows, batch.labels] = params.scale_s * (
        batch.values[rows, batch.labels] - params.margin_m
    )
    loss, dlogits = _softmax_ce(logits, batch.labels)
    grad = params.scale_s * dlogits  # d logit / d cos is s everywhere
    return LossOutput(loss, grad)


def aam_loss(batch: CosineLogitBatch, params: LossParams) -> LossOutput:
    b, n = batch.values.shape
    rows = np.arange(b)
    target_cos = batch.values[rows, batch.labels]
    target_val, target_deriv = _cos_plus_margin(target_cos, params.margin_m)

    logits = params.scale_s * batch.values.copy()
    logits[rows, batch.labels] = params.scale_s * target_val
    loss, dlogits = _softmax_ce(logits, batch.labels)

    dcos = params.scale_s * dlogits
    dcos[rows, batch.labels] = params.scale_s * dlogits[rows, batch.labels] * target_deriv
    return LossOutput(loss, dcos)


def intertopk_loss(batch: CosineLogitBatch, params: LossParams) -> LossOutput:
    b, n = batch.values.shape
    if params.topk_k >= n:
        raise ParamError(f"topk_k={params.topk_k} must be < class count {n}")
    rows = np.arange(b)
    target_cos = batch.values[rows, batch.labels]
    target_val, target_deriv = _cos_plus_margin(target_cos, params.margin_m)

    # rank non-target cosines; stable sort on -cos breaks ties by lower index
    masked = batch.values.copy()
    masked[rows, batch.labels] = -np.inf
    order = np.argsort(-masked, axis=1, kind="stable")
    topk_cols = order[:, : params.topk_k]
    topk_mask = np.zeros((b, n), dtype=bool)
    topk_mask[rows[:, None], topk_cols] = True

    pen_val, pen_deriv = _cos_minus_margin(batch.values, params.topk_margin)

    logits = params.scale_s * np.where(topk_mask, pen_val, batch.values)
    logits[rows, batch.labels] = params.scale_s * target_val
    loss, dlogits = _softmax_ce(logits, batch.labels)

    dcos = params.scale_s * dlogits * np.where(topk_mask, pen_deriv, 1.0)
    dcos[rows, batch.labels] = params.scale_s * dlogits[rows, batch.labels] * target_deriv
    return LossOutput(loss, dcos)


def hem_loss(batch: CosineLogitBatch, params: LossParams) -> LossOutput:
    """Hard-example-mining margin loss.

    A non-target class j is penalized with cos(theta_j - m') exactly when
    cos(theta_j) > cos(theta_y + m); otherwise it keeps its plain cosine.
    """
    b, n = batch.values.shape
    rows = np.arange(b)
    target_cos = batch.values[rows, batch.labels]
    target_val, target_deriv = _cos_plus_margin(target_cos, params.margin_m)

    hard = batch.values > target_val[:, None]
    hard[rows, batch.labels] = False

    pen_val, pen_deriv = _cos_minus_margin(batch.values, params.hem_margin)

    logits = params.scale_s * np.where(hard, pen_val, batch.values)
    logits[rows, batch.labels] = params.scale_s * target_val
    loss, dlogits = _softmax_ce(logits, batch.labels)

    dcos = params.scale_s * dlogits * np.where(hard, pen_deriv, 1.0)
    dcos[rows, batch.labels] = params.scale_s * dlogits[rows, batch.labels] * target_deriv
    return LossOutput(loss, dcos)


def subcenter_reduce(batch: SubCenterLogitBatch) -> tuple[CosineLogitBatch, np.ndarray]:
    """Max-reduce over sub-centers; returns the reduced batch and the argmax
    (B x N) used to route gradients back to the selected sub-center."""
    argmax = np.argmax(batch.values, axis=2)  # first index wins ties
    b, n, _ = batch.values.shape
    reduced = np.take_along_axis(batch.values, argmax[..., None], axis=2)[..., 0]
    return CosineLogitBatch(reduced, batch.labels), argmax


def expand_subcenter_grad(grad_bn: np.ndarray, argmax: np.ndarray, k: int) -> np.ndarray:
    """Scatter a B x N cosine gradient onto the selected sub-centers."""
    b, n = grad_bn.shape
    out = np.zeros((b, n, k))
    np.put_along_axis(out, argmax[..., None], grad_bn[..., None], axis=2)
    return out


_KERNELS = {
    "am": am_loss,
    "aam": aam_loss,
    "subcenter_aam": aam_loss,  # the reduction happens before the kernel
    "intertopk": intertopk_loss,
    "hem": hem_loss,
}


def margin_loss(batch: CosineLogitBatch, params: LossParams, kind: str) -> LossOutput:
    if kind not in _KERNELS:
        raise ParamError(f"unknown loss kind {kind!r}; choose from {KINDS}")
    return _KERNELS[kind](batch, params)


def _normalize_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError(f"zero-norm {what} row")
    return x / norms[..., None], norms


def loss_from_embeddings(
    embeddings: np.ndarray,
    centers: np.ndarray,
    labels,
    params: LossParams,
    kind: str,
) -> EmbeddingLossOutput:
    """Compose row normalization -> cosines -> margin loss, with gradients
    for both embeddings and centers.

    `centers` may be (N, D) or (N, K, D); the latter triggers sub-center
    max-reduction regardless of `kind`.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    e_hat, e_norms = _normalize_rows(embeddings, "embedding")
    c_hat, c_norms = _normalize_rows(centers, "center")

    if centers.ndim == 2:
        cos = np.clip(e_hat @ c_hat.T, -1.0, 1.0)  # (B, N)
        out = margin_loss(CosineLogitBatch(cos, labels), params, kind)
        g = out.grad  # (B, N)
        # d cos_ij / d e_i = (c_hat_j - cos_ij * e_hat_i) / |e_i|
        grad_e = (g @ c_hat - (g * cos).sum(axis=1)[:, None] * e_hat) / e_norms[:, None]
        grad_c = (g.T @ e_hat - (g * cos).sum(axis=0)[:, None] * c_hat) / c_norms[:, None]
        return EmbeddingLossOutput(out.loss, grad_e, grad_c, cos)

    if centers.ndim != 3:
        raise FormatError("centers must be (N, D) or (N, K, D)")
    n, k, d = centers.shape
    flat_hat = c_hat.reshape(n * k, d)
    cos_flat = np.clip(e_hat @ flat_hat.T, -1.0, 1.0)  # (B, N*K)
    cos = cos_flat.reshape(-1, n, k)
    reduced, argmax = subcenter_reduce(SubCenterLogitBatch(cos, labels))
    out = margin_loss(reduced, params, kind)
    g3 = expand_subcenter_grad(out.grad, argmax, k)  # (B, N, K)
    g = g3.reshape(-1, n * k)
    grad_e = (g @ flat_hat - (g * cos_flat).sum(axis=1)[:, None] * e_hat) / e_norms[:, None]
    grad_c_flat = (
        g.T @ e_hat - (g * cos_flat).sum(axis=0)[:, None] * flat_hat
    ) / c_norms.reshape(n * k, 1)
    return EmbeddingLossOutput(out.loss, grad_e, grad_c_flat.reshape(n, k, d), cos)
