"""Ternary objectness labels and proposal ranking.

Labels: 0 non-object, 1 true object, 2 potential unlabeled novel object.
A sampled negative becomes 2 when its best known-class score clears the
classification gate; positives are always 1.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from htrpn.geometry import Box
from htrpn.sampler import SampledBatch

THRE_CLS = 0.75
TOP_K = 1000


class TernaryLabel(IntEnum):
    NON_OBJECT = 0
    OBJECT = 1
    POTENTIAL = 2


class RankStage(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class CombineOp(str, Enum):
    MAX = "max"
    SUM = "sum"


@dataclass(frozen=True)
class Proposal:
    """A first-stage candidate.

    ``tobj_logits`` are raw (pre-softmax) scores for non-object, object and
    potential object. ``class_scores`` are post-softmax known-class
    probabilities.
    """

    bbox_c: Box
    tobj_logits: tuple[float, float, float]
    iou_gt_p: float = 0.0
    class_scores: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.tobj_logits) != 3:
            raise ValueError(f"need 3 objectness logits, got {len(self.tobj_logits)}")
        if not 0.0 <= self.iou_gt_p <= 1.0:
            raise ValueError(f"iou_gt_p out of [0, 1]: {self.iou_gt_p}")


@dataclass(frozen=True)
class Detection:
    class_index: int
    confidence: float
    bbox_r: Box

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0, 1]: {self.confidence}")


def gate_scores(
    class_scores: np.ndarray, background: int | None = None
) -> np.ndarray:
    """Best known-class score per row, skipping the ``background`` column."""
    scores = np.asarray(class_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"class scores must be 2-D, got shape {scores.shape}")
    if scores.size and (np.any(scores < 0.0) or np.any(scores > 1.0) or np.any(np.isnan(scores))):
        raise ValueError("class scores must lie in [0, 1]")
    if background is not None:
        scores = np.delete(scores, background, axis=1)
    if scores.shape[1] == 0:
        return np.zeros(len(scores))
    return scores.max(axis=1)


def assign_ternary(
    sampled: SampledBatch,
    class_scores: np.ndarray | Sequence[Sequence[float]],
    thre_cls: float = THRE_CLS,
    background: int | None = None,
) -> np.ndarray:
    """Ternary labels for a sampled batch, in ``sampled.ids`` order.

    Args:
        sampled: The batch; positives come first in the output.
        class_scores: One score row per sampled negative, in
            ``sampled.negatives`` order.
        thre_cls: Gate; a negative is relabeled 2 iff its best known-class
            score is strictly greater.
        background: Column index of a background class to ignore, if any.

    Returns:
        ``int8`` labels, ``len(sampled)`` long.
    """
    if not 0.0 < thre_cls < 1.0:
        raise ValueError(f"thre_cls must be in (0, 1), got {thre_cls}")
    n_neg = len(sampled.negatives)
    scores = np.asarray(class_scores, dtype=np.float64)
    if len(scores) != n_neg:
        raise ValueError(f"expected {n_neg} score rows, got {len(scores)}")
    best = gate_scores(scores, background) if n_neg else np.empty(0)
    neg_labels = np.where(best > thre_cls, TernaryLabel.POTENTIAL, TernaryLabel.NON_OBJECT)
    pos_labels = np.full(len(sampled.positives), TernaryLabel.OBJECT)
    return np.concatenate([pos_labels, neg_labels]).astype(np.int8)


def combined_objectness(tobj_logits: Sequence[float], op: CombineOp | str = CombineOp.MAX) -> float:
    """Merge the object and potential-object logits; the non-object logit is unused."""
    obj, pot = float(tobj_logits[1]), float(tobj_logits[2])
    if CombineOp(op) is CombineOp.MAX:
        return max(obj, pot)
    return obj + pot


def ranking_scores(
    logits: np.ndarray, stage: RankStage | str, op: CombineOp | str = CombineOp.MAX
) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 3)
    if RankStage(stage) is RankStage.PRETRAIN:
        return logits[:, 1].copy()
    if CombineOp(op) is CombineOp.MAX:
        return np.maximum(logits[:, 1], logits[:, 2])
    return logits[:, 1] + logits[:, 2]


def rank_logits(
    logits: np.ndarray,
    stage: RankStage | str,
    k: int = TOP_K,
    op: CombineOp | str = CombineOp.MAX,
) -> np.ndarray:
    """Indices of the top ``k`` rows of an ``(N, 3)`` logit array, best first.

    Ties keep the lower original index first.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    scores = ranking_scores(logits, stage, op)
    order = np.argsort(-scores, kind="stable")
    return order[: min(k, len(order))]


def rank_proposals(
    proposals: Sequence[Proposal],
    stage: RankStage | str,
    k: int = TOP_K,
    op: CombineOp | str = CombineOp.MAX,
) -> np.ndarray:
    """Rank proposals for RoI pooling.

    Pre-training ranks by the object logit alone; fine-tuning ranks by
    :func:`combined_objectness`.
    """
    logits = np.array([p.tobj_logits for p in proposals], dtype=np.float64).reshape(-1, 3)
    return rank_logits(logits, stage, k, op)
