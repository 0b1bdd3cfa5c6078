"""Synthetic scenes and Monte-Carlo experiments for negative-anchor sampling.

Scenes are pure geometry: labeled base-class boxes plus unlabeled novel
boxes. Class scores for anchors come from a two-parameter confusion model
rather than a trained head:

* an anchor overlapping a novel box (IoU >= ``overlap_iou``) is "confused"
  with probability ``p_confuse`` and gets a base-class score above the gate;
* every other anchor gets base-class scores strictly below the gate;
* ``score_noise`` adds Gaussian jitter to all base-class scores, which can
  push background anchors over the gate.

Every trial seeds its own generators from ``(master seed, trial index)``, so
results do not depend on how trials are split across worker processes.
"""

from __future__ import annotations

import functools
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from htrpn.geometry import iou_matrix
from htrpn.matcher import MatchResult, match_anchors
from htrpn.pyramid import AnchorSet, PyramidSpec, generate_anchors
from htrpn.sampler import SampleConfig, SampledBatch, Strategy, sample_batch
from htrpn.ternary import THRE_CLS, TernaryLabel, assign_ternary

COVERAGE_IOU = 0.3

# stream tags mixed into per-trial seeds
_SCENE, _SAMPLE, _SCORES = 0, 1, 2


@dataclass(frozen=True)
class SceneConfig:
    """Scene distribution and score-confusion model.

    Object counts are Poisson with the given means. Object sides are
    ``sqrt(w * h)`` drawn uniformly from the scale ranges, with the
    width/height ratio log-uniform over ``aspect_range``.
    """

    image_size: tuple[int, int] = (800, 800)
    base_rate: float = 2.0
    novel_rate: float = 1.5
    base_scale: tuple[float, float] = (32.0, 256.0)
    novel_scale: tuple[float, float] = (256.0, 512.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    num_base_classes: int = 15
    p_confuse: float = 0.5
    score_noise: float = 0.0
    overlap_iou: float = COVERAGE_IOU
    thre_cls: float = THRE_CLS
    seed: int = 0

    def __post_init__(self) -> None:
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        if not 0.0 <= self.p_confuse <= 1.0:
            raise ValueError(f"p_confuse must be in [0, 1], got {self.p_confuse}")
        if not 0.0 <= self.overlap_iou <= 1.0:
            raise ValueError(f"overlap_iou must be in [0, 1], got {self.overlap_iou}")
        if self.base_rate < 0 or self.novel_rate < 0 or self.score_noise < 0:
            raise ValueError("rates and score_noise must be non-negative")
        if self.num_base_classes < 1:
            raise ValueError("need at least one base class")
        for lo, hi in (self.base_scale, self.novel_scale, self.aspect_range):
            if not 0 < lo <= hi:
                raise ValueError(f"bad range ({lo}, {hi})")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SceneConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Scene:
    labeled: np.ndarray
    labeled_classes: np.ndarray
    novel: np.ndarray
    image_size: tuple[int, int] = (800, 800)


@dataclass(frozen=True)
class BatchStats:
    label_counts: tuple[int, int, int]
    fg_bg_ratio: float
    batch_size: int
    negatives_per_level: tuple[int, ...] = field(default=())

    @property
    def potential(self) -> int:
        return self.label_counts[TernaryLabel.POTENTIAL]


@dataclass(frozen=True)
class CoverageReport:
    """Per-strategy novel-coverage probabilities from paired trials.

    ``rows`` holds one ``(trial, n_novel, covered_random, covered_hsamp)``
    tuple per trial.
    """

    trials: int
    coverage_iou: float
    p_random: float
    se_random: float
    p_hsamp: float
    se_hsamp: float
    mean_diff: float
    se_diff: float
    rows: tuple[tuple[int, int, int, int], ...] = field(repr=False, default=())

    @property
    def z_diff(self) -> float:
        if self.se_diff == 0:
            return math.inf if self.mean_diff > 0 else (0.0 if self.mean_diff == 0 else -math.inf)
        return self.mean_diff / self.se_diff

    def summary(self) -> dict[str, Any]:
        return {
            "trials": self.trials,
            "coverage_iou": self.coverage_iou,
            "random": {"p": self.p_random, "stderr": self.se_random},
            "hsamp": {"p": self.p_hsamp, "stderr": self.se_hsamp},
            "paired_diff": {"mean": self.mean_diff, "stderr": self.se_diff},
        }


def trial_seed(master: int, trial: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(trial), int(stream)])


def _random_boxes(
    rng: np.random.Generator,
    n: int,
    scale: tuple[float, float],
    aspect: tuple[float, float],
    image_size: tuple[int, int],
) -> np.ndarray:
    img_w, img_h = image_size
    side = rng.uniform(scale[0], scale[1], size=n)
    ratio = np.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1]), size=n))
    w = np.minimum(side * np.sqrt(ratio), img_w)
    h = np.minimum(side / np.sqrt(ratio), img_h)
    x1 = rng.uniform(0.0, 1.0, size=n) * (img_w - w)
    y1 = rng.uniform(0.0, 1.0, size=n) * (img_h - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1).reshape(-1, 4)


def generate_scene(cfg: SceneConfig, seed: Any = None) -> Scene:
    """Draw one scene. ``seed`` defaults to ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n_base = int(rng.poisson(cfg.base_rate))
    n_novel = int(rng.poisson(cfg.novel_rate))
    labeled = _random_boxes(rng, n_base, cfg.base_scale, cfg.aspect_range, cfg.image_size)
    classes = rng.integers(0, cfg.num_base_classes, size=n_base)
    novel = _random_boxes(rng, n_novel, cfg.novel_scale, cfg.aspect_range, cfg.image_size)
    return Scene(labeled=labeled, labeled_classes=classes, novel=novel, image_size=cfg.image_size)


def novel_overlap(scene: Scene, boxes: np.ndarray, min_iou: float) -> np.ndarray:
    """Mask of ``boxes`` whose best IoU with a novel box is at least ``min_iou``."""
    if len(scene.novel) == 0 or len(boxes) == 0:
        return np.zeros(len(boxes), dtype=bool)
    return iou_matrix(boxes, scene.novel).max(axis=1) >= min_iou


def synth_class_scores(scene: Scene, cfg: SceneConfig, boxes: np.ndarray, seed: Any = None) -> np.ndarray:
    """Class-probability rows for candidate boxes under the confusion model.

    Returns:
        ``(N, C + 1)`` array; the first ``C`` columns are base classes and
        the last is background. Rows sum to 1.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n, c = len(boxes), cfg.num_base_classes
    overlap = novel_overlap(scene, boxes, cfg.overlap_iou)
    # fixed draw layout per row keeps results independent of the mask
    confuse_u = rng.random(n)
    level_u = 1.0 - rng.random(n)  # in (0, 1]
    which = rng.integers(0, c, size=n)
    split = rng.dirichlet(np.ones(c + 1), size=n) if n else np.empty((0, c + 1))
    noise = rng.normal(0.0, 1.0, size=(n, c)) * cfg.score_noise

    confused = overlap & (confuse_u < cfg.p_confuse)
    scores = np.zeros((n, c + 1))
    # unconfused rows: total base mass below the gate, shared by a Dirichlet split
    base_mass = level_u * cfg.thre_cls * (1.0 - 1e-9)
    base_split = split[:, :c] / np.maximum(split[:, :c].sum(axis=1, keepdims=True), 1e-300)
    scores[:, :c] = base_split * base_mass[:, None]
    # confused rows: one class above the gate, the rest of the mass split over the others
    top = cfg.thre_cls + (1.0 - cfg.thre_cls) * level_u
    rest = split.copy()
    rest[np.arange(n), which] = 0.0
    rest /= np.maximum(rest.sum(axis=1, keepdims=True), 1e-300)
    conf_rows = rest * (1.0 - top)[:, None]
    conf_rows[np.arange(n), which] = top
    scores[confused] = conf_rows[confused]

    if cfg.score_noise > 0:
        base = np.clip(scores[:, :c] + noise, 0.0, 1.0)
        total = base.sum(axis=1, keepdims=True)
        base = np.where(total > 1.0, base / np.maximum(total, 1e-300), base)
        scores[:, :c] = base
    scores[:, c] = np.clip(1.0 - scores[:, :c].sum(axis=1), 0.0, 1.0)
    return scores


@functools.lru_cache(maxsize=8)
def cached_anchors(spec: PyramidSpec, image_w: int, image_h: int) -> AnchorSet:
    return generate_anchors(spec, image_w, image_h)


def _covered(scene: Scene, anchors: AnchorSet, ids: np.ndarray, coverage_iou: float) -> bool:
    if len(scene.novel) == 0 or len(ids) == 0:
        return False
    return bool(novel_overlap(scene, anchors.boxes[ids], coverage_iou).any())


def _coverage_chunk(args) -> list[tuple[int, int, int, int]]:
    cfg, spec, sample_cfg, coverage_iou, start, stop = args
    anchors = cached_anchors(spec, *cfg.image_size)
    rows = []
    for t in range(start, stop):
        scene = generate_scene(cfg, trial_seed(cfg.seed, t, _SCENE))
        match = match_anchors(anchors, scene.labeled)
        covered = []
        for strategy in (Strategy.RANDOM, Strategy.HSAMP):
            batch = sample_batch(
                match, replace(sample_cfg, strategy=strategy), trial_seed(cfg.seed, t, _SAMPLE)
            )
            covered.append(int(_covered(scene, anchors, batch.negatives, coverage_iou)))
        rows.append((t, len(scene.novel), covered[0], covered[1]))
    return rows


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if len(x) == 0:
        return 0.0, 0.0
    mean = float(x.mean())
    if len(x) < 2:
        return mean, 0.0
    return mean, float(x.std(ddof=1) / math.sqrt(len(x)))


def _run_chunks(fn, cfg_args: tuple, trials: int, workers: int) -> list:
    if workers <= 1 or trials < 2:
        return fn((*cfg_args, 0, trials))
    bounds = np.linspace(0, trials, workers + 1).astype(int)
    jobs = [(*cfg_args, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, jobs))
    return [row for part in parts for row in part]


def coverage_experiment(
    cfg: SceneConfig,
    trials: int,
    coverage_iou: float = COVERAGE_IOU,
    spec: PyramidSpec | None = None,
    sample_cfg: SampleConfig | None = None,
    workers: int = 1,
) -> CoverageReport:
    """Probability that a sampled batch holds a negative covering a novel object.

    Each trial draws one scene and one training batch per strategy. Both
    strategies use the same sampling seed, so they share the scene and the
    positive draw and differ only in how negatives are picked.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    spec = spec or PyramidSpec.default()
    sample_cfg = sample_cfg or SampleConfig()
    rows = _run_chunks(_coverage_chunk, (cfg, spec, sample_cfg, coverage_iou), trials, workers)
    arr = np.array([r[2:] for r in rows], dtype=np.float64)
    p_r, se_r = _mean_se(arr[:, 0])
    p_h, se_h = _mean_se(arr[:, 1])
    d, se_d = _mean_se(arr[:, 1] - arr[:, 0])
    return CoverageReport(
        trials=trials,
        coverage_iou=coverage_iou,
        p_random=p_r,
        se_random=se_r,
        p_hsamp=p_h,
        se_hsamp=se_h,
        mean_diff=d,
        se_diff=se_d,
        rows=tuple(tuple(int(v) for v in r) for r in rows),
    )


def label_batch(
    scene: Scene,
    match: MatchResult,
    anchors: AnchorSet,
    cfg: SceneConfig,
    sample_cfg: SampleConfig,
    seed: Any,
    score_seed: Any,
) -> tuple[SampledBatch, np.ndarray]:
    """Sample a batch and assign ternary labels from synthesized scores."""
    batch = sample_batch(match, sample_cfg, seed)
    scores = synth_class_scores(scene, cfg, anchors.boxes[batch.negatives], score_seed)
    labels = assign_ternary(batch, scores, cfg.thre_cls, background=cfg.num_base_classes)
    return batch, labels


def batch_statistics(
    scene: Scene,
    strategy: Strategy | str,
    seed: Any,
    cfg: SceneConfig | None = None,
    spec: PyramidSpec | None = None,
    sample_cfg: SampleConfig | None = None,
) -> BatchStats:
    """Match, sample, label and count one training batch.

    The foreground/background ratio is ``#label1 / #(label0 + label2)``;
    it is NaN when the batch holds no background anchors.
    """
    cfg = cfg or SceneConfig()
    spec = spec or PyramidSpec.default()
    sample_cfg = replace(sample_cfg or SampleConfig(), strategy=Strategy(strategy))
    anchors = cached_anchors(spec, *scene.image_size)
    match = match_anchors(anchors, scene.labeled)
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    sample_seed, score_seed = ss.spawn(2)
    batch, labels = label_batch(scene, match, anchors, cfg, sample_cfg, sample_seed, score_seed)
    counts = np.bincount(labels, minlength=3)
    bg = int(counts[0] + counts[2])
    ratio = float(counts[1]) / bg if bg else math.nan
    return BatchStats(
        label_counts=(int(counts[0]), int(counts[1]), int(counts[2])),
        fg_bg_ratio=ratio,
        batch_size=len(batch),
        negatives_per_level=batch.negatives_per_level,
    )


def _stats_chunk(args) -> list[tuple]:
    cfg, spec, sample_cfg, strategy, start, stop = args
    rows = []
    for t in range(start, stop):
        scene = generate_scene(cfg, trial_seed(cfg.seed, t, _SCENE))
        st = batch_statistics(scene, strategy, trial_seed(cfg.seed, t, _SCORES), cfg, spec, sample_cfg)
        rows.append((t, *st.label_counts, st.fg_bg_ratio))
    return rows


def batch_statistics_experiment(
    cfg: SceneConfig,
    scenes: int,
    strategy: Strategy | str = Strategy.HSAMP,
    spec: PyramidSpec | None = None,
    sample_cfg: SampleConfig | None = None,
    workers: int = 1,
) -> dict[str, Any]:
    """Per-batch label counts over many scenes, with 95% normal intervals."""
    spec = spec or PyramidSpec.default()
    sample_cfg = sample_cfg or SampleConfig()
    rows = _run_chunks(
        _stats_chunk, (cfg, spec, sample_cfg, Strategy(strategy)), scenes, workers
    )
    arr = np.array([r[1:4] for r in rows], dtype=np.float64)
    ratios = np.array([r[4] for r in rows], dtype=np.float64)
    ratios = ratios[np.isfinite(ratios)]
    out: dict[str, Any] = {"scenes": scenes, "strategy": Strategy(strategy).value}
    for col, name in enumerate(("label0", "label1", "label2")):
        mean, se = _mean_se(arr[:, col])
        out[name] = {"mean": mean, "ci95": [mean - 1.96 * se, mean + 1.96 * se]}
    mean, se = _mean_se(ratios)
    out["fg_bg_ratio"] = {"mean": mean, "ci95": [mean - 1.96 * se, mean + 1.96 * se]}
    out["rows"] = rows
    return out


def best_anchor_levels(anchors: AnchorSet, boxes: Sequence[np.ndarray] | np.ndarray) -> list[tuple[int, float]]:
    """For each box, the pyramid level of its best-IoU anchor and that IoU."""
    out = []
    for box in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        ids, ious = anchors.ious_with(box)
        if len(ids) == 0 or ious.max() <= 0:
            out.append((-1, 0.0))
            continue
        k = int(np.argmax(ious))
        out.append((int(anchors.levels[ids[k]]), float(ious[k])))
    return out
