"""Anchor-to-ground-truth matching with the 0.7 / 0.3 IoU thresholds."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from htrpn.geometry import Box, as_array, iou_matrix
from htrpn.pyramid import AnchorSet

T_POS = 0.7
T_NEG = 0.3


class Status(IntEnum):
    NEGATIVE = 0
    ACTIVE = 1
    IGNORE = 2


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor match outcome.

    Attributes:
        iou: max IoU of each anchor over the ground-truth boxes.
        best_gt: index of the best ground-truth box, ``-1`` when there is none
            or the best IoU is 0.
        status: :class:`Status` codes as ``int8``.
        levels: pyramid level of each anchor.
        num_levels: number of pyramid levels.
    """

    iou: np.ndarray
    best_gt: np.ndarray
    status: np.ndarray
    levels: np.ndarray
    num_levels: int

    def __len__(self) -> int:
        return len(self.status)

    def ids_with(self, status: Status) -> np.ndarray:
        return np.flatnonzero(self.status == status)

    def level_pools(self, status: Status = Status.NEGATIVE) -> list[np.ndarray]:
        """Anchor ids with ``status``, split by level, each sorted ascending."""
        ids = self.ids_with(status)
        lv = self.levels[ids]
        return [ids[lv == level] for level in range(self.num_levels)]

    def pool_sizes(self, status: Status = Status.NEGATIVE) -> list[int]:
        mask = self.status == status
        return np.bincount(self.levels[mask], minlength=self.num_levels).tolist()

    def counts(self) -> dict[str, int]:
        return {s.name.lower(): int(np.count_nonzero(self.status == s)) for s in Status}


def classify(iou: np.ndarray, t_pos: float = T_POS, t_neg: float = T_NEG) -> np.ndarray:
    """Status codes for max-IoU values; both thresholds are strict."""
    status = np.full(len(iou), Status.IGNORE, dtype=np.int8)
    status[iou > t_pos] = Status.ACTIVE
    status[iou < t_neg] = Status.NEGATIVE
    return status


def _check_thresholds(t_pos: float, t_neg: float) -> None:
    if not 0.0 <= t_neg <= t_pos <= 1.0:
        raise ValueError(f"thresholds must satisfy 0 <= t_neg <= t_pos <= 1, got {t_neg}, {t_pos}")


def match_anchors(
    anchors: AnchorSet,
    gt: Sequence[Box] | np.ndarray,
    t_pos: float = T_POS,
    t_neg: float = T_NEG,
) -> MatchResult:
    """Label each anchor Active, Negative or Ignore by its best ground-truth IoU.

    No anchor is force-matched to a ground-truth box; only the thresholds
    decide. Ties in the best box go to the lowest ground-truth index.
    """
    _check_thresholds(t_pos, t_neg)
    gt_arr = as_array(gt) if len(gt) else np.empty((0, 4))
    n = len(anchors)
    best_iou = np.zeros(n, dtype=np.float64)
    best_gt = np.full(n, -1, dtype=np.int64)
    for j, box in enumerate(gt_arr):
        ids, ious = anchors.ious_with(box)
        better = ious > best_iou[ids]
        best_iou[ids[better]] = ious[better]
        best_gt[ids[better]] = j
    return MatchResult(
        iou=best_iou,
        best_gt=best_gt,
        status=classify(best_iou, t_pos, t_neg),
        levels=anchors.levels,
        num_levels=anchors.num_levels,
    )


def match_boxes(
    boxes: np.ndarray,
    levels: np.ndarray,
    num_levels: int,
    gt: Sequence[Box] | np.ndarray,
    t_pos: float = T_POS,
    t_neg: float = T_NEG,
) -> MatchResult:
    """Dense matching for an arbitrary anchor array (no grid structure needed)."""
    _check_thresholds(t_pos, t_neg)
    boxes = as_array(boxes)
    gt_arr = as_array(gt) if len(gt) else np.empty((0, 4))
    if len(gt_arr) == 0:
        best_iou = np.zeros(len(boxes))
        best_gt = np.full(len(boxes), -1, dtype=np.int64)
    else:
        m = iou_matrix(boxes, gt_arr)
        best_gt = np.argmax(m, axis=1).astype(np.int64)
        best_iou = m[np.arange(len(boxes)), best_gt]
        best_gt[best_iou <= 0] = -1
    return MatchResult(
        iou=best_iou,
        best_gt=best_gt,
        status=classify(best_iou, t_pos, t_neg),
        levels=np.asarray(levels, dtype=np.int8),
        num_levels=num_levels,
    )
