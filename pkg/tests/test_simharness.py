import math
from dataclasses import replace

import numpy as np
import pytest

from htrpn.matcher import match_anchors
from htrpn.pyramid import PyramidSpec, generate_anchors
from htrpn.sampler import SampleConfig, SampledBatch
from htrpn.simharness import (
    Scene,
    SceneConfig,
    batch_statistics,
    batch_statistics_experiment,
    best_anchor_levels,
    cached_anchors,
    coverage_experiment,
    generate_scene,
    label_batch,
    novel_overlap,
    synth_class_scores,
    trial_seed,
)
from htrpn.ternary import assign_ternary
from tests.conftest import LARGE_NOVEL

SMALL = SceneConfig(image_size=(256, 256), base_scale=(16, 96), novel_scale=(64, 160))


def empty_scene(size=(800, 800), novel=()):
    return Scene(
        labeled=np.empty((0, 4)),
        labeled_classes=np.empty(0, dtype=int),
        novel=np.array(novel, dtype=float).reshape(-1, 4),
        image_size=size,
    )


class TestScene:
    def test_zero_novel_rate(self):
        for seed in range(20):
            assert len(generate_scene(SceneConfig(novel_rate=0.0), seed).novel) == 0

    def test_deterministic(self):
        a = generate_scene(SceneConfig(), 5)
        b = generate_scene(SceneConfig(), 5)
        np.testing.assert_array_equal(a.labeled, b.labeled)
        np.testing.assert_array_equal(a.novel, b.novel)
        np.testing.assert_array_equal(a.labeled_classes, b.labeled_classes)

    def test_boxes_inside_image(self):
        cfg = SceneConfig(base_rate=6, novel_rate=6, novel_scale=(300, 900))
        for seed in range(50):
            s = generate_scene(cfg, seed)
            for boxes in (s.labeled, s.novel):
                assert np.all(boxes[:, :2] >= 0)
                assert np.all(boxes[:, 2] <= 800) and np.all(boxes[:, 3] <= 800)
                assert np.all(boxes[:, 2:] > boxes[:, :2])

    def test_large_novel_boxes_match_top_levels(self):
        cfg = SceneConfig(novel_rate=5, novel_scale=(400, 400), aspect_range=(1, 1))
        anchors = cached_anchors(PyramidSpec.default(), 800, 800)
        for seed in range(10):
            for level, best in best_anchor_levels(anchors, generate_scene(cfg, seed).novel):
                # sides 256 and 512 are the nearest anchor sizes to 400
                assert level in (3, 4)
                assert best > 0.3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(p_confuse=1.5)
        with pytest.raises(ValueError):
            SceneConfig(image_size=(0, 10))
        with pytest.raises(ValueError):
            SceneConfig(novel_scale=(300, 100))
        with pytest.raises(ValueError):
            SceneConfig.from_dict({"bogus": 1})

    def test_dict_round_trip(self):
        cfg = SceneConfig(p_confuse=0.3, image_size=(640, 480))
        assert SceneConfig.from_dict(cfg.to_dict()) == cfg


class TestScores:
    def novel_rows(self, cfg, n, seed):
        novel = [100.0, 100.0, 500.0, 500.0]
        scene = empty_scene(novel=[novel])
        return synth_class_scores(scene, cfg, np.tile(novel, (n, 1)), seed)

    def test_rows_are_distributions(self):
        cfg = SceneConfig(score_noise=0.2)
        scene = generate_scene(cfg, 1)
        boxes = generate_anchors(PyramidSpec.default(), 128, 128).boxes
        scores = synth_class_scores(scene, cfg, boxes, 0)
        assert scores.shape == (len(boxes), cfg.num_base_classes + 1)
        assert np.all(scores >= 0) and np.all(scores <= 1)
        assert np.all(scores.sum(axis=1) <= 1 + 1e-9)

    def test_never_confused(self):
        cfg = SceneConfig(p_confuse=0.0)
        scores = self.novel_rows(cfg, 1000, 0)
        assert not np.any(assign_ternary(_negatives(1000), scores, background=cfg.num_base_classes) == 2)

    def test_always_confused(self):
        cfg = SceneConfig(p_confuse=1.0)
        scores = self.novel_rows(cfg, 1000, 0)
        assert np.all(assign_ternary(_negatives(1000), scores, background=cfg.num_base_classes) == 2)

    def test_forced_confusion_through_sampler(self):
        anchors = generate_anchors(PyramidSpec.default(), 64, 64)
        target = anchors.boxes[100]
        scene = empty_scene(size=(64, 64), novel=[target])
        cfg = SceneConfig(p_confuse=1.0, image_size=(64, 64))
        far = anchors.level_slice(0).stop - 1  # bottom-right corner of the finest level
        assert not novel_overlap(scene, anchors.boxes[[far]], cfg.overlap_iou)[0]
        batch = SampledBatch(np.empty(0, dtype=int), np.array([100, far]), (2, 0, 0, 0, 0))
        scores = synth_class_scores(scene, cfg, anchors.boxes[batch.negatives], 3)
        labels = assign_ternary(batch, scores, background=cfg.num_base_classes)
        assert labels.tolist() == [2, 0]

    def test_binomial_confusion_rate(self):
        cfg = SceneConfig(p_confuse=0.5)
        n = 10_000
        scores = self.novel_rows(cfg, n, 11)
        k = np.count_nonzero(assign_ternary(_negatives(n), scores, background=cfg.num_base_classes) == 2)
        sigma = math.sqrt(n * 0.25)
        assert abs(k - n / 2) < 3 * sigma

    def test_label_two_requires_novel_overlap_without_noise(self):
        cfg = replace(SMALL, score_noise=0.0, novel_rate=3.0, p_confuse=0.8)
        anchors = cached_anchors(PyramidSpec.default(), *cfg.image_size)
        seen_two = 0
        for t in range(60):
            scene = generate_scene(cfg, trial_seed(1, t, 0))
            match = match_anchors(anchors, scene.labeled)
            batch, labels = label_batch(scene, match, anchors, cfg, SampleConfig(), t, t + 1000)
            two = batch.ids[labels == 2]
            assert np.all(novel_overlap(scene, anchors.boxes[two], cfg.overlap_iou))
            seen_two += len(two)
        assert seen_two > 0

    def test_deterministic(self):
        cfg = SceneConfig(score_noise=0.1)
        a = self.novel_rows(cfg, 50, 2)
        np.testing.assert_array_equal(a, self.novel_rows(cfg, 50, 2))


def _negatives(n):
    return SampledBatch(np.empty(0, dtype=int), np.arange(n), (n, 0, 0, 0, 0))


class TestCoverage:
    def test_no_novel_objects(self):
        report = coverage_experiment(replace(SMALL, novel_rate=0.0), trials=50)
        assert report.p_random == report.p_hsamp == 0.0
        assert report.se_diff == 0.0

    def test_vacuous_threshold(self):
        report = coverage_experiment(SMALL, trials=100, coverage_iou=0.0)
        for _, n_novel, r, h in report.rows:
            assert r == h == int(n_novel > 0)

    def test_rows_and_bounds(self):
        report = coverage_experiment(SMALL, trials=40)
        assert report.trials == len(report.rows) == 40
        assert [r[0] for r in report.rows] == list(range(40))
        for p in (report.p_random, report.p_hsamp):
            assert 0.0 <= p <= 1.0

    def test_worker_count_does_not_change_rows(self):
        one = coverage_experiment(SMALL, trials=30, workers=1)
        two = coverage_experiment(SMALL, trials=30, workers=2)
        assert one == two

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            coverage_experiment(SMALL, trials=0)

    def test_stderr_shrinks_with_trials(self, large_regime_report):
        small = coverage_experiment(LARGE_NOVEL, trials=1_000)
        ratio = small.se_diff / large_regime_report.se_diff
        assert ratio == pytest.approx(math.sqrt(10), rel=0.2)
        # the first 1,000 paired trials are shared between the two runs
        assert small.rows == large_regime_report.rows[:1_000]


class TestBatchStats:
    def test_empty_scene(self):
        st = batch_statistics(empty_scene(), "hsamp", 0)
        assert st.label_counts == (256, 0, 0)
        assert st.fg_bg_ratio == 0.0

    def test_counts_sum_to_batch(self):
        cfg = SceneConfig(base_rate=4.0)
        for seed in range(20):
            scene = generate_scene(cfg, seed)
            for strategy in ("random", "hsamp"):
                st = batch_statistics(scene, strategy, seed, cfg)
                assert sum(st.label_counts) == st.batch_size <= 256

    def test_experiment_report(self):
        out = batch_statistics_experiment(SMALL, scenes=20)
        assert len(out["rows"]) == 20
        lo, hi = out["label2"]["ci95"]
        assert lo <= out["label2"]["mean"] <= hi
        again = batch_statistics_experiment(SMALL, scenes=20, workers=2)
        assert again == out
