"""Axis-aligned box arithmetic.

Boxes are ``(x1, y1, x2, y2)`` corners in continuous pixel coordinates.
Scalar helpers work on :class:`Box` values; the ``*_array`` variants work on
``(N, 4)`` float64 arrays and are what the anchor pipeline uses.

Zero-area boxes are legal but degenerate: their IoU with anything is 0.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when a delta is encoded or decoded against a zero-area box."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + 0.5 * self.width, self.y1 + 0.5 * self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> Box:
        """Build a box from COCO-style ``(x, y, w, h)``."""
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets scaled by anchor size plus log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


def area(box: Box) -> float:
    return box.area


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def as_array(boxes: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Coerce boxes to a ``(N, 4)`` float64 array."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_with_box(boxes: np.ndarray, box: np.ndarray) -> np.ndarray:
    """IoU of every row of ``boxes`` against a single box.

    Performs the same float operations, in the same order, as :func:`iou`,
    so results agree bit for bit with the scalar path.
    """
    iw = np.minimum(boxes[:, 2], box[2]) - np.maximum(boxes[:, 0], box[0])
    ih = np.minimum(boxes[:, 3], box[3]) - np.maximum(boxes[:, 1], box[1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    box_area = (box[2] - box[0]) * (box[3] - box[1])
    union = area_array(boxes) + box_area - inter
    out = np.zeros(len(boxes), dtype=np.float64)
    ok = overlap & (union > 0)
    out[ok] = inter[ok] / union[ok]
    return out


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise ``(N, M)`` IoU matrix."""
    boxes_a = as_array(boxes_a)
    boxes_b = as_array(boxes_b)
    out = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    for j, b in enumerate(boxes_b):
        out[:, j] = iou_with_box(boxes_a, b)
    return out


def encode_deltas(anchor: Box, gt: Box) -> BoxDelta:
    """Regression target that moves ``anchor`` onto ``gt``."""
    if anchor.area <= 0:
        raise DegenerateBoxError(f"anchor has zero area: {anchor}")
    if gt.area <= 0:
        raise DegenerateBoxError(f"target box has zero area: {gt}")
    (acx, acy), (gcx, gcy) = anchor.center, gt.center
    return BoxDelta(
        dx=(gcx - acx) / anchor.width,
        dy=(gcy - acy) / anchor.height,
        dw=math.log(gt.width / anchor.width),
        dh=math.log(gt.height / anchor.height),
    )


def decode_deltas(anchor: Box, delta: BoxDelta) -> Box:
    """Apply ``delta`` to ``anchor``. No clipping is performed."""
    if anchor.area <= 0:
        raise DegenerateBoxError(f"anchor has zero area: {anchor}")
    acx, acy = anchor.center
    cx = acx + delta.dx * anchor.width
    cy = acy + delta.dy * anchor.height
    w = anchor.width * math.exp(delta.dw)
    h = anchor.height * math.exp(delta.dh)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_deltas` over matching rows."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateBoxError("zero-area anchor in batch")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise DegenerateBoxError("zero-area target box in batch")
    dx = ((gts[:, 0] + 0.5 * gw) - (anchors[:, 0] + 0.5 * aw)) / aw
    dy = ((gts[:, 1] + 0.5 * gh) - (anchors[:, 1] + 0.5 * ah)) / ah
    return np.stack([dx, dy, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateBoxError("zero-area anchor in batch")
    cx = anchors[:, 0] + 0.5 * aw + deltas[:, 0] * aw
    cy = anchors[:, 1] + 0.5 * ah + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def _flatten_deltas(deltas: Sequence[BoxDelta] | np.ndarray) -> np.ndarray:
    if isinstance(deltas, np.ndarray):
        return np.asarray(deltas, dtype=np.float64).reshape(-1)
    return np.array([d.as_tuple() for d in deltas], dtype=np.float64).reshape(-1)


def smooth_l1(
    pred: Sequence[BoxDelta] | np.ndarray,
    target: Sequence[BoxDelta] | np.ndarray,
) -> float:
    """Mean smooth-L1 over all delta coordinates.

    The kernel is ``0.5 r**2`` for ``|r| < 1`` and ``|r| - 0.5`` otherwise.
    Empty inputs give 0.
    """
    p = _flatten_deltas(pred)
    t = _flatten_deltas(target)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size // 4} vs {t.size // 4} deltas")
    if p.size == 0:
        return 0.0
    r = np.abs(p - t)
    per_coord = np.where(r < 1.0, 0.5 * r * r, r - 0.5)
    return float(per_coord.mean())
