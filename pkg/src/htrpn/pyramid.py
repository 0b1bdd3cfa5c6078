"""Feature pyramid layout and fixed anchor grids.

Anchors are stored flat, level-major, then row, column, anchor index::

    id = level_offset[l] + (row * w_l + col) * A + a

so every anchor id maps back to its ``(level, row, col, a)`` tag without a
lookup table. Anchors are centered at ``(cell + 0.5) * stride`` and are not
clipped to the image.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from htrpn.geometry import iou_with_box

NUM_LEVELS = 5
ANCHORS_PER_CELL = 3


@dataclass(frozen=True)
class LevelSpec:
    name: str
    stride: int
    base_size: float
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def anchor_shapes(self) -> list[tuple[float, float]]:
        """``(width, height)`` per aspect ratio, with ``width / height = ratio``."""
        return [
            (self.base_size * math.sqrt(r), self.base_size / math.sqrt(r))
            for r in self.aspect_ratios
        ]


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[LevelSpec, ...]

    def __post_init__(self) -> None:
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} pyramid levels, got {len(self.levels)}")
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must be strictly increasing: {strides}")
        for lv in self.levels:
            if lv.stride <= 0 or lv.base_size <= 0:
                raise ValueError(f"level {lv.name}: stride and base_size must be positive")
            if len(lv.aspect_ratios) != ANCHORS_PER_CELL:
                raise ValueError(
                    f"level {lv.name}: need {ANCHORS_PER_CELL} aspect ratios, "
                    f"got {len(lv.aspect_ratios)}"
                )
            if any(r <= 0 for r in lv.aspect_ratios):
                raise ValueError(f"level {lv.name}: aspect ratios must be positive")

    @classmethod
    def default(cls) -> PyramidSpec:
        return cls.from_lists(
            strides=(4, 8, 16, 32, 64),
            base_sizes=(32, 64, 128, 256, 512),
            aspect_ratios=(0.5, 1.0, 2.0),
        )

    @classmethod
    def from_lists(
        cls,
        strides: Sequence[int],
        base_sizes: Sequence[float],
        aspect_ratios: Sequence[float] = (0.5, 1.0, 2.0),
        names: Sequence[str] | None = None,
    ) -> PyramidSpec:
        if len(strides) != len(base_sizes):
            raise ValueError("strides and base_sizes must have the same length")
        names = names or [f"p{i + 2}" for i in range(len(strides))]
        return cls(
            tuple(
                LevelSpec(n, int(s), float(b), tuple(float(r) for r in aspect_ratios))
                for n, s, b in zip(names, strides, base_sizes)
            )
        )

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PyramidSpec:
        """Load from ``{"strides": [...], "base_sizes": [...], "aspect_ratios": [...]}``.

        ``aspect_ratios`` may be one list shared by all levels or a list of lists.
        """
        ratios = data.get("aspect_ratios", [0.5, 1.0, 2.0])
        strides = data["strides"]
        if ratios and isinstance(ratios[0], (list, tuple)):
            per_level = ratios
        else:
            per_level = [ratios] * len(strides)
        names = data.get("names") or [f"p{i + 2}" for i in range(len(strides))]
        return cls(
            tuple(
                LevelSpec(n, int(s), float(b), tuple(float(r) for r in rs))
                for n, s, b, rs in zip(names, strides, data["base_sizes"], per_level)
            )
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "names": [lv.name for lv in self.levels],
            "strides": [lv.stride for lv in self.levels],
            "base_sizes": [lv.base_size for lv in self.levels],
            "aspect_ratios": [list(lv.aspect_ratios) for lv in self.levels],
        }

    @property
    def names(self) -> list[str]:
        return [lv.name for lv in self.levels]


def feature_shape(image_w: int, image_h: int, stride: int) -> tuple[int, int]:
    """Feature-map ``(rows, cols)`` for an image, by ceiling division."""
    if image_w <= 0 or image_h <= 0 or stride <= 0:
        raise ValueError(
            f"image size and stride must be positive, got {image_w}x{image_h}, stride {stride}"
        )
    return (-(-image_h // stride), -(-image_w // stride))


@dataclass(frozen=True)
class AnchorSet:
    """All anchors of one image, flattened level-major.

    Attributes:
        spec: Pyramid the anchors were generated from.
        image_size: ``(width, height)`` in pixels.
        shapes: Per-level feature shape ``(rows, cols)``.
        boxes: ``(N, 4)`` anchor corners.
        offsets: ``L + 1`` prefix offsets; level ``l`` owns ids
            ``offsets[l]:offsets[l + 1]``.
    """

    spec: PyramidSpec
    image_size: tuple[int, int]
    shapes: tuple[tuple[int, int], ...]
    boxes: np.ndarray
    offsets: np.ndarray
    levels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_levels(self) -> int:
        return len(self.shapes)

    def counts(self) -> list[int]:
        return [int(n) for n in np.diff(self.offsets)]

    def level_slice(self, level: int) -> slice:
        return slice(int(self.offsets[level]), int(self.offsets[level + 1]))

    def level_boxes(self, level: int) -> np.ndarray:
        return self.boxes[self.level_slice(level)]

    def tag(self, anchor_id: int) -> tuple[int, int, int, int]:
        """``(level, row, col, anchor index)`` of a flat anchor id."""
        level = int(np.searchsorted(self.offsets, anchor_id, side="right")) - 1
        if level < 0 or level >= self.num_levels:
            raise IndexError(f"anchor id {anchor_id} out of range")
        local = anchor_id - int(self.offsets[level])
        _, cols = self.shapes[level]
        cell, a = divmod(local, ANCHORS_PER_CELL)
        row, col = divmod(cell, cols)
        return level, row, col, a

    def candidates(self, box: np.ndarray) -> np.ndarray:
        """Ids of anchors whose extent may overlap ``box``.

        Uses the regular grid to bound the cell window per level and anchor
        shape, widened by one cell on each side. Every anchor with a positive
        intersection is included; some with none may be.
        """
        x1, y1, x2, y2 = (float(v) for v in box)
        ids = []
        for level, lv in enumerate(self.spec.levels):
            rows, cols = self.shapes[level]
            s = lv.stride
            for a, (aw, ah) in enumerate(lv.anchor_shapes()):
                # anchor center c overlaps iff x1 - aw/2 < c < x2 + aw/2
                c0 = max(math.floor((x1 - 0.5 * aw) / s - 0.5) - 1, 0)
                c1 = min(math.ceil((x2 + 0.5 * aw) / s - 0.5) + 1, cols - 1)
                r0 = max(math.floor((y1 - 0.5 * ah) / s - 0.5) - 1, 0)
                r1 = min(math.ceil((y2 + 0.5 * ah) / s - 0.5) + 1, rows - 1)
                if c0 > c1 or r0 > r1:
                    continue
                rr, cc = np.meshgrid(
                    np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij"
                )
                local = (rr * cols + cc).ravel() * ANCHORS_PER_CELL + a
                ids.append(local + int(self.offsets[level]))
        if not ids:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(ids))

    def ious_with(self, box: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sparse IoU of all anchors with one box.

        Returns:
            ``(ids, ious)`` for the candidate window; every anchor outside
            ``ids`` has IoU exactly 0.
        """
        ids = self.candidates(box)
        return ids, iou_with_box(self.boxes[ids], np.asarray(box, dtype=np.float64))


def generate_anchors(spec: PyramidSpec, image_w: int, image_h: int) -> AnchorSet:
    """Place ``3 * rows * cols`` anchors on every pyramid level."""
    all_boxes = []
    all_levels = []
    shapes = []
    offsets = [0]
    for level, lv in enumerate(spec.levels):
        rows, cols = feature_shape(image_w, image_h, lv.stride)
        shapes.append((rows, cols))
        cy = (np.arange(rows, dtype=np.float64) + 0.5) * lv.stride
        cx = (np.arange(cols, dtype=np.float64) + 0.5) * lv.stride
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        wh = np.array(lv.anchor_shapes(), dtype=np.float64)
        # (rows, cols, A) layout so the flat order is row, col, anchor
        half_w = 0.5 * wh[None, None, :, 0]
        half_h = 0.5 * wh[None, None, :, 1]
        cxx = cxx[:, :, None]
        cyy = cyy[:, :, None]
        boxes = np.stack(
            np.broadcast_arrays(cxx - half_w, cyy - half_h, cxx + half_w, cyy + half_h),
            axis=-1,
        ).reshape(-1, 4)
        all_boxes.append(boxes)
        all_levels.append(np.full(len(boxes), level, dtype=np.int8))
        offsets.append(offsets[-1] + len(boxes))
    return AnchorSet(
        spec=spec,
        image_size=(image_w, image_h),
        shapes=tuple(shapes),
        boxes=np.concatenate(all_boxes),
        offsets=np.asarray(offsets, dtype=np.int64),
        levels=np.concatenate(all_levels),
    )
