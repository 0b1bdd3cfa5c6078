"""Detection loss stack: objectness cross-entropy, IoU-gated supervised
contrastive loss on proposal features, and the weighted totals.

All arithmetic is float64. Features are unit-normalized once, up front,
inside the contrastive loss; zero-norm features raise.

Contrastive loss per proposal ``i`` with unit features ``u``::

    L_i = -1/P_i * sum_{j != i, y_j == y_i} log softmax_{k != i}(u_i . u_k / tau)[j]

where ``P_i`` counts the other proposals sharing ``i``'s label. A proposal
with no such partner contributes 0. The batch loss averages ``w_i * L_i``
over all proposals, ``w_i = 1[iou_i >= phi]``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

ALPHA = 0.5
LAMBDA = 0.5
TAU = 0.2
PHI = 0.7
FEATURE_DIM = 128


class ZeroNormFeatureError(ValueError):
    """A contrastive feature vector has zero length and cannot be normalized."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = ALPHA
    lam: float = LAMBDA
    tau: float = TAU
    phi: float = PHI
    # not used by any loss; kept so a breakdown records the gate it was run with
    thre_cls: float = 0.75

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi must be in [0, 1], got {self.phi}")

    def to_dict(self) -> dict[str, float]:
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "tau": self.tau,
            "phi": self.phi,
            "thre_cls": self.thre_cls,
        }


@dataclass(frozen=True)
class ContrastiveBatch:
    """Proposal features with their labels and ground-truth IoUs."""

    features: np.ndarray
    labels: np.ndarray
    ious: np.ndarray

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        labels = np.asarray(self.labels).reshape(-1)
        ious = np.asarray(self.ious, dtype=np.float64).reshape(-1)
        if not (len(feats) == len(labels) == len(ious)):
            raise ValueError(
                f"length mismatch: {len(feats)} features, {len(labels)} labels, {len(ious)} ious"
            )
        if len(feats) < 1:
            raise ValueError("batch must hold at least one proposal")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ious", ious)

    def __len__(self) -> int:
        return len(self.labels)

    def permuted(self, order: Sequence[int]) -> ContrastiveBatch:
        order = np.asarray(order)
        return ContrastiveBatch(self.features[order], self.labels[order], self.ious[order])


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_bbox: float
    l_obj: float
    l_tcon: float
    l_tobj: float
    l_contra: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def cross_entropy(logits: np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Mean of ``-log softmax(logits)[label]`` over rows, max-subtracted."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    if len(logits) != len(labels):
        raise ValueError(f"length mismatch: {len(logits)} rows, {len(labels)} labels")
    if len(labels) == 0:
        return 0.0
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - shifted[np.arange(len(labels)), labels]
    return float(nll.mean())


def ternary_ce(logits: np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Objectness loss over ``(N, 3)`` logits and labels in {0, 1, 2}."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 3:
        raise ValueError(f"ternary logits must have shape (N, 3), got {logits.shape}")
    return cross_entropy(logits, labels)


def instance_cls_loss(class_logits: np.ndarray, class_labels: Sequence[int] | np.ndarray) -> float:
    return cross_entropy(class_logits, class_labels)


def contrast_weight(iou: float | np.ndarray, phi: float = PHI) -> float | np.ndarray:
    """Hard-clip proposal weight: 1 when ``iou >= phi``, else 0."""
    if np.ndim(iou) == 0:
        return 1.0 if iou >= phi else 0.0
    return (np.asarray(iou) >= phi).astype(np.float64)


def _unit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms == 0).tolist()
        raise ZeroNormFeatureError(f"zero-norm feature rows: {bad}")
    return features / norms[:, None], norms


def _contrastive_terms(batch: ContrastiveBatch, tau: float):
    """Shared pieces of the loss and its gradient.

    Returns unit features, norms, the off-diagonal softmax ``p``, the
    same-label partner mask, partner counts, and per-proposal losses.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    u, norms = _unit(batch.features)
    n = len(batch)
    eye = np.eye(n, dtype=bool)
    logits = (u @ u.T) / tau
    logits[eye] = -np.inf
    same = (batch.labels[:, None] == batch.labels[None, :]) & ~eye
    partners = same.sum(axis=1)
    if n == 1:
        return u, norms, np.zeros((1, 1)), same, partners, np.zeros(1)
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    p = exp / denom
    log_p = np.where(eye, 0.0, shifted - np.log(denom))
    per_sample = np.zeros(n)
    has = partners > 0
    per_sample[has] = -(np.where(same, log_p, 0.0).sum(axis=1)[has]) / partners[has]
    return u, norms, p, same, partners, per_sample


def sup_con_all(batch: ContrastiveBatch, tau: float = TAU) -> np.ndarray:
    """Unweighted per-proposal contrastive losses."""
    return _contrastive_terms(batch, tau)[-1]


def sup_con_per_sample(batch: ContrastiveBatch, i: int, tau: float = TAU) -> float:
    if not 0 <= i < len(batch):
        raise IndexError(f"proposal index {i} out of range for batch of {len(batch)}")
    return float(sup_con_all(batch, tau)[i])


def tcon_loss(batch: ContrastiveBatch, tau: float = TAU, phi: float = PHI) -> float:
    """IoU-gated mean supervised contrastive loss over a proposal batch."""
    per_sample = sup_con_all(batch, tau)
    w = contrast_weight(batch.ious, phi)
    return float(np.sum(w * per_sample) / len(batch))


def roi_contra_loss(batch: ContrastiveBatch, tau: float = TAU, phi: float = PHI) -> float:
    """Same loss as :func:`tcon_loss`, applied to RoI features with class labels."""
    return tcon_loss(batch, tau, phi)


def sup_con_grad(batch: ContrastiveBatch, tau: float = TAU, phi: float = PHI) -> np.ndarray:
    """Gradient of :func:`tcon_loss` with respect to the raw features.

    With ``s_ik = u_i . u_k / tau``, each loss term has
    ``dL_i/ds_ik = p_ik - [k partner of i] / P_i``. Collecting these into
    ``G`` (scaled by ``w_i / N``), the gradient on unit features is
    ``(G + G^T) u / tau``, which is then projected through the normalization
    ``u = z / |z|``.
    """
    u, norms, p, same, partners, _ = _contrastive_terms(batch, tau)
    n = len(batch)
    if n == 1:
        return np.zeros_like(batch.features)
    w = contrast_weight(batch.ious, phi)
    coef = np.where(partners > 0, w / n, 0.0)
    safe_partners = np.maximum(partners, 1)[:, None]
    g = coef[:, None] * (p - same / safe_partners)
    np.fill_diagonal(g, 0.0)
    grad_u = ((g + g.T) @ u) / tau
    radial = np.sum(grad_u * u, axis=1, keepdims=True)
    return (grad_u - radial * u) / norms[:, None]


def total_loss(
    *,
    l_cls: float,
    l_bbox: float,
    l_obj: float,
    l_tcon: float,
    l_contra: float,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Combine loss parts with the objectness and contrastive weights."""
    w = weights or LossWeights()
    parts = {"l_cls": l_cls, "l_bbox": l_bbox, "l_obj": l_obj, "l_tcon": l_tcon, "l_contra": l_contra}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise ValueError(f"{name} is not finite: {value}")
    l_tobj = l_obj + w.lam * l_tcon
    total = l_cls + l_bbox + l_tobj + w.alpha * l_contra
    return LossBreakdown(
        l_cls=float(l_cls),
        l_bbox=float(l_bbox),
        l_obj=float(l_obj),
        l_tcon=float(l_tcon),
        l_tobj=float(l_tobj),
        l_contra=float(l_contra),
        total=float(total),
    )
