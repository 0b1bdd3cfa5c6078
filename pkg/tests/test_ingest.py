import csv
import json
import math
import random
from pathlib import Path

import numpy as np
import pytest

from htrpn.geometry import Box
from htrpn.ingest import (
    POOL_CSV_FIELDS,
    AnnotationParseError,
    DatasetValidationError,
    load_coco,
    load_split,
    parse_coco,
    pool_stats,
)
from htrpn.pyramid import PyramidSpec

FIXTURES = Path(__file__).parent / "fixtures"
LEVELS = [("p2", 4, 32), ("p3", 8, 64), ("p4", 16, 128), ("p5", 32, 256), ("p6", 64, 512)]
RATIOS = (0.5, 1.0, 2.0)


def oracle_pool_rows(coco, held_out, base, coverage_iou=0.3):
    """Per-image, per-level pool counts by dense enumeration with plain floats."""

    def iou(a, b):
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union

    rows = []
    for im in sorted(coco["images"], key=lambda i: i["id"]):
        anns = [a for a in coco["annotations"] if a["image_id"] == im["id"]]

        def corners(a):
            x, y, w, h = a["bbox"]
            return (x, y, x + w, y + h)

        labeled = [corners(a) for a in anns if a["category_id"] in base]
        novel = [corners(a) for a in anns if a["category_id"] in held_out]
        for level, (name, stride, size) in enumerate(LEVELS):
            counts = dict(anchors=0, negative=0, active=0, ignore=0, novel_covering=0)
            for r in range(math.ceil(im["height"] / stride)):
                for c in range(math.ceil(im["width"] / stride)):
                    cx, cy = (c + 0.5) * stride, (r + 0.5) * stride
                    for ratio in RATIOS:
                        w, h = size * math.sqrt(ratio), size / math.sqrt(ratio)
                        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                        best = max((iou(box, g) for g in labeled), default=0.0)
                        counts["anchors"] += 1
                        if best > 0.7:
                            counts["active"] += 1
                        elif best < 0.3:
                            counts["negative"] += 1
                            if any(iou(box, n) >= coverage_iou for n in novel):
                                counts["novel_covering"] += 1
                        else:
                            counts["ignore"] += 1
            rows.append([str(im["id"]), name] + [str(counts[k]) for k in POOL_CSV_FIELDS[2:]])
    return rows


def coco_dict():
    return json.loads((FIXTURES / "tiny_coco.json").read_text())


def stats_as_strings(stats):
    return [[str(r[0]), stats.level_names[r[1]], *map(str, r[2:])] for r in stats.rows]


def test_xywh_conversion():
    ds = parse_coco(
        {"images": [{"id": 1, "width": 100, "height": 100}],
         "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]}]}
    )
    assert ds.labeled[0].box == Box(10, 20, 40, 60)


def test_empty_dataset():
    ds = parse_coco({"images": [], "annotations": []})
    assert ds.labeled == [] and ds.novel == []
    assert pool_stats(ds).rows == ()


def test_split_rule():
    data = {
        "images": [{"id": 1, "width": 50, "height": 50}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]},
            {"id": 2, "image_id": 1, "category_id": 7, "bbox": [5, 5, 10, 10]},
        ],
    }
    ds = parse_coco(data, held_out=[7])
    assert [a.id for a in ds.labeled] == [1]
    assert [a.id for a in ds.novel] == [2]


def test_split_file_drops_unlisted_categories():
    held, base = load_split(FIXTURES / "split.json")
    data = coco_dict()
    data["annotations"].append({"id": 99, "image_id": 1, "category_id": 8, "bbox": [0, 0, 5, 5]})
    ds = parse_coco(data, held, base)
    assert ds.dropped == 1
    assert sorted(a.id for a in ds.labeled) == [10, 12]
    assert sorted(a.id for a in ds.novel) == [11, 13]


def test_overlapping_split_rejected():
    with pytest.raises(DatasetValidationError):
        parse_coco(coco_dict(), held_out=[1], base=[1, 2])


def test_malformed_json_reports_offset(tmp_path):
    raw = b'{"images": [], "annotations": [,]}'
    path = tmp_path / "bad.json"
    path.write_bytes(raw)
    with pytest.raises(AnnotationParseError) as info:
        load_coco(path)
    assert info.value.offset == raw.index(b",]")


def test_offset_counts_bytes_not_characters(tmp_path):
    raw = '{"categories": [{"id": 1, "name": "vélo"}], oops}'.encode()
    path = tmp_path / "bad.json"
    path.write_bytes(raw)
    with pytest.raises(AnnotationParseError) as info:
        load_coco(path)
    assert info.value.offset == raw.index(b"oops")


def test_dangling_image_reference_lists_ids():
    data = coco_dict()
    data["annotations"] += [
        {"id": 50, "image_id": 9, "category_id": 1, "bbox": [0, 0, 1, 1]},
        {"id": 51, "image_id": 8, "category_id": 1, "bbox": [0, 0, 1, 1]},
    ]
    with pytest.raises(DatasetValidationError) as info:
        parse_coco(data)
    assert info.value.annotation_ids == [50, 51]


def test_bad_bbox_rejected():
    data = coco_dict()
    data["annotations"][0]["bbox"] = [0, 0, -1, 4]
    with pytest.raises(DatasetValidationError) as info:
        parse_coco(data)
    assert info.value.annotation_ids == [10]


def test_unlabeled_image_has_full_negative_pools():
    ds = parse_coco({"images": [{"id": 3, "width": 800, "height": 800}], "annotations": []})
    rows = pool_stats(ds).rows
    assert [r[2] for r in rows] == [120_000, 30_000, 7_500, 1_875, 507]
    assert [r[3] for r in rows] == [r[2] for r in rows]
    assert sum(r[2] for r in rows) == 159_882


def test_pools_shrink_up_the_pyramid():
    held, base = load_split(FIXTURES / "split.json")
    stats = pool_stats(load_coco(FIXTURES / "tiny_coco.json", held, base))
    for image_id in (1, 2):
        rows = [r for r in stats.rows if r[0] == image_id]
        assert all(a[2] >= b[2] for a, b in zip(rows, rows[1:]))
        assert all(a[3] >= b[3] for a, b in zip(rows, rows[1:]))


def test_matches_dense_oracle():
    held, base = load_split(FIXTURES / "split.json")
    stats = pool_stats(load_coco(FIXTURES / "tiny_coco.json", held, base))
    expected = oracle_pool_rows(coco_dict(), set(held), set(base))
    assert stats_as_strings(stats) == expected


def test_frozen_csv_matches_oracle():
    with open(FIXTURES / "pool_stats_expected.csv", newline="") as f:
        frozen = list(csv.reader(f))
    assert frozen[0] == list(POOL_CSV_FIELDS)
    held, base = load_split(FIXTURES / "split.json")
    assert frozen[1:] == oracle_pool_rows(coco_dict(), set(held), set(base))


def test_round_trip_is_value_identical():
    data = coco_dict()
    ds = parse_coco(data, held_out=[3])
    out = ds.to_coco()
    for before, after in zip(sorted(data["annotations"], key=lambda a: a["id"]), out["annotations"]):
        assert after["bbox"] == before["bbox"]
        assert after["category_id"] == before["category_id"]
    again = parse_coco(out, held_out=[3])
    assert again.labeled == ds.labeled and again.novel == ds.novel


def test_order_independent():
    data = coco_dict()
    base = pool_stats(parse_coco(data, held_out=[3]))
    rng = random.Random(0)
    for _ in range(5):
        shuffled = dict(data)
        shuffled["annotations"] = rng.sample(data["annotations"], len(data["annotations"]))
        shuffled["images"] = rng.sample(data["images"], len(data["images"]))
        assert pool_stats(parse_coco(shuffled, held_out=[3])) == base


def test_stripping_labels_keeps_geometry():
    data = coco_dict()
    plain = parse_coco(data)
    stripped = parse_coco(data, held_out=[3])
    geom = {a.id: a.box for a in plain.labeled}
    for ann in stripped.labeled + stripped.novel:
        assert ann.box == geom[ann.id]
    assert len(stripped.labeled) + len(stripped.novel) == len(plain.labeled)


def test_coverage_threshold_must_be_positive():
    with pytest.raises(ValueError):
        pool_stats(parse_coco(coco_dict()), coverage_iou=0.0)


def test_summary_histogram():
    held, base = load_split(FIXTURES / "split.json")
    summary = pool_stats(load_coco(FIXTURES / "tiny_coco.json", held, base)).summary()
    assert summary["images"] == 2
    assert summary["novel_boxes"] == sum(summary["novel_best_level_histogram"]) == 2
    assert summary["images_with_novel"] == 2
    assert summary["anchors_per_level"] == [
        sum(3 * math.ceil(w / s) * math.ceil(h / s) for w, h in ((128, 96), (64, 64)))
        for _, s, _ in LEVELS
    ]
    assert np.isclose(sum(summary["negative_share_per_level"]), 1.0)


def test_custom_pyramid_names():
    spec = PyramidSpec.from_lists((4, 8, 16, 32, 64), (32, 64, 128, 256, 512))
    assert pool_stats(parse_coco(coco_dict()), spec).level_names == tuple(n for n, _, _ in LEVELS)
