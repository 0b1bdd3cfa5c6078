"""COCO annotation ingestion and per-image anchor-pool statistics.

Held-out categories are stripped of their labels on load and kept as an
unlabeled novel list, which is how unseen objects sit in real training
images. Only annotation geometry is read; images are never opened.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from htrpn.geometry import Box
from htrpn.matcher import T_NEG, T_POS, Status, match_anchors
from htrpn.pyramid import PyramidSpec, generate_anchors

COVERAGE_IOU = 0.3

POOL_CSV_FIELDS = (
    "image_id",
    "level",
    "anchors",
    "negative",
    "active",
    "ignore",
    "novel_covering",
)


class AnnotationParseError(ValueError):
    """The annotation file is not valid JSON.

    Attributes:
        offset: byte offset of the error in the file.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DatasetValidationError(ValueError):
    def __init__(self, message: str, annotation_ids: Iterable[Any] = ()):
        self.annotation_ids = list(annotation_ids)
        if self.annotation_ids:
            message = f"{message}: annotation ids {self.annotation_ids}"
        super().__init__(message)


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    """One COCO annotation; ``bbox`` keeps the original ``(x, y, w, h)`` values."""

    id: Any
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]

    @property
    def box(self) -> Box:
        return Box.from_xywh(*self.bbox)


@dataclass
class Dataset:
    images: list[ImageInfo]
    labeled: list[Annotation]
    novel: list[Annotation]
    categories: dict[int, str] = field(default_factory=dict)
    base_ids: frozenset[int] = frozenset()
    held_out_ids: frozenset[int] = frozenset()
    dropped: int = 0

    def boxes_by_image(self) -> dict[int, tuple[list[Box], list[Box]]]:
        """``image_id -> (labeled boxes, novel boxes)`` for every image."""
        out: dict[int, tuple[list[Box], list[Box]]] = {im.id: ([], []) for im in self.images}
        for ann in self.labeled:
            out[ann.image_id][0].append(ann.box)
        for ann in self.novel:
            out[ann.image_id][1].append(ann.box)
        return out

    def to_coco(self) -> dict[str, Any]:
        """Serialize back to COCO JSON, novel annotations regaining their category."""
        anns = sorted(self.labeled + self.novel, key=lambda a: a.id)
        return {
            "images": [{"id": im.id, "width": im.width, "height": im.height} for im in self.images],
            "annotations": [
                {"id": a.id, "image_id": a.image_id, "bbox": list(a.bbox), "category_id": a.category_id}
                for a in anns
            ],
            "categories": [{"id": k, "name": v} for k, v in sorted(self.categories.items())],
        }


def _parse_json(raw: bytes) -> Any:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AnnotationParseError(f"invalid UTF-8: {exc.reason}", exc.start) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise AnnotationParseError(f"malformed JSON: {exc.msg}", offset) from exc


def parse_coco(
    data: dict[str, Any],
    held_out: Iterable[int] = (),
    base: Iterable[int] | None = None,
) -> Dataset:
    """Build a :class:`Dataset` from already-parsed COCO JSON.

    Args:
        data: COCO dictionary with ``images``, ``annotations`` and optionally
            ``categories``.
        held_out: Category ids whose annotations become unlabeled novel boxes.
        base: Labeled category ids. Defaults to every category not held out;
            when given, annotations in neither set are dropped.
    """
    if not isinstance(data, dict):
        raise DatasetValidationError("top-level JSON value must be an object")
    held = frozenset(int(c) for c in held_out)
    base_set = None if base is None else frozenset(int(c) for c in base)
    if base_set is not None and base_set & held:
        raise DatasetValidationError(
            f"base and held-out category sets overlap: {sorted(base_set & held)}"
        )
    images = []
    for im in data.get("images", []):
        images.append(ImageInfo(int(im["id"]), int(im["width"]), int(im["height"])))
    image_ids = {im.id for im in images}
    if len(image_ids) != len(images):
        raise DatasetValidationError("duplicate image ids")
    categories = {int(c["id"]): str(c.get("name", c["id"])) for c in data.get("categories", [])}

    dangling, bad_boxes = [], []
    labeled, novel = [], []
    dropped = 0
    for raw in data.get("annotations", []):
        ann_id = raw.get("id")
        bbox = raw.get("bbox")
        if raw.get("image_id") not in image_ids:
            dangling.append(ann_id)
            continue
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4 or bbox[2] < 0 or bbox[3] < 0:
            bad_boxes.append(ann_id)
            continue
        ann = Annotation(ann_id, int(raw["image_id"]), int(raw["category_id"]), tuple(bbox))
        if ann.category_id in held:
            novel.append(ann)
        elif base_set is None or ann.category_id in base_set:
            labeled.append(ann)
        else:
            dropped += 1
    if dangling:
        raise DatasetValidationError("annotations reference unknown images", dangling)
    if bad_boxes:
        raise DatasetValidationError("annotations with malformed bbox", bad_boxes)
    base_ids = base_set if base_set is not None else frozenset(set(categories) - held)
    return Dataset(images, labeled, novel, categories, base_ids, held, dropped)


def load_coco(
    path: str | Path,
    held_out: Iterable[int] = (),
    base: Iterable[int] | None = None,
) -> Dataset:
    """Read a COCO annotation file; see :func:`parse_coco` for the split rule."""
    raw = Path(path).read_bytes()
    return parse_coco(_parse_json(raw), held_out, base)


def load_split(path: str | Path) -> tuple[list[int], list[int] | None]:
    """Read ``{"held_out": [...], "base": [...]}``; ``base`` is optional."""
    data = _parse_json(Path(path).read_bytes())
    if not isinstance(data, dict) or "held_out" not in data:
        raise DatasetValidationError("split file must be an object with a 'held_out' list")
    base = data.get("base")
    return [int(c) for c in data["held_out"]], (None if base is None else [int(c) for c in base])


@dataclass(frozen=True)
class PoolStats:
    """Anchor-pool statistics for a dataset.

    ``rows`` follow :data:`POOL_CSV_FIELDS`, sorted by image id then level.
    """

    level_names: tuple[str, ...]
    rows: tuple[tuple[int, ...], ...]
    images: tuple[dict[str, Any], ...]

    def summary(self) -> dict[str, Any]:
        n_levels = len(self.level_names)
        neg = [0] * n_levels
        total = [0] * n_levels
        for row in self.rows:
            total[row[1]] += row[2]
            neg[row[1]] += row[3]
        best_hist = [0] * n_levels
        n_novel = 0
        for im in self.images:
            for level in im["novel_best_levels"]:
                n_novel += 1
                if level >= 0:
                    best_hist[level] += 1
        novel_images = [im for im in self.images if im["n_novel"] > 0]
        return {
            "images": len(self.images),
            "levels": list(self.level_names),
            "anchors_per_level": total,
            "negatives_per_level": neg,
            "negative_share_per_level": [n / sum(neg) if sum(neg) else 0.0 for n in neg],
            "novel_boxes": n_novel,
            "novel_best_level_histogram": best_hist,
            "images_with_novel": len(novel_images),
            "images_novel_coverable": sum(1 for im in novel_images if im["coverage_feasible"]),
        }


def pool_stats(
    ds: Dataset,
    spec: PyramidSpec | None = None,
    coverage_iou: float = COVERAGE_IOU,
    t_pos: float = T_POS,
    t_neg: float = T_NEG,
) -> PoolStats:
    """Per-image, per-level Negative pools and novel-coverage feasibility.

    Anchors are matched against labeled boxes only. An image's novel objects
    are coverable when some anchor reaches IoU >= ``coverage_iou`` with one
    of them; ``novel_covering`` counts such anchors per level that are also
    Negative, i.e. eligible for negative sampling.
    """
    if not coverage_iou > 0:
        raise ValueError(f"coverage_iou must be positive, got {coverage_iou}")
    spec = spec or PyramidSpec.default()
    boxes = ds.boxes_by_image()
    anchors_cache: dict[tuple[int, int], Any] = {}
    rows = []
    images = []
    for im in sorted(ds.images, key=lambda i: i.id):
        key = (im.width, im.height)
        if key not in anchors_cache:
            anchors_cache[key] = generate_anchors(spec, im.width, im.height)
        anchors = anchors_cache[key]
        labeled, novel = boxes[im.id]
        match = match_anchors(anchors, labeled, t_pos, t_neg)
        covering = np.zeros(len(anchors), dtype=bool)
        best_levels = []
        feasible = False
        for nb in novel:
            ids, ious = anchors.ious_with(np.array(nb.as_tuple()))
            hit = ids[ious >= coverage_iou]
            feasible = feasible or len(hit) > 0
            covering[hit] = True
            if len(ids) and ious.max() > 0:
                best_levels.append(int(anchors.levels[ids[int(np.argmax(ious))]]))
            else:
                best_levels.append(-1)
        covering &= match.status == Status.NEGATIVE
        n = anchors.num_levels
        by_status = {
            s: np.bincount(anchors.levels[match.status == s], minlength=n) for s in Status
        }
        cover_counts = np.bincount(anchors.levels[covering], minlength=n)
        for level, count in enumerate(anchors.counts()):
            rows.append(
                (
                    im.id,
                    level,
                    count,
                    int(by_status[Status.NEGATIVE][level]),
                    int(by_status[Status.ACTIVE][level]),
                    int(by_status[Status.IGNORE][level]),
                    int(cover_counts[level]),
                )
            )
        images.append(
            {
                "image_id": im.id,
                "n_labeled": len(labeled),
                "n_novel": len(novel),
                "coverage_feasible": feasible,
                "novel_best_levels": best_levels,
            }
        )
    return PoolStats(tuple(spec.names), tuple(rows), tuple(images))
