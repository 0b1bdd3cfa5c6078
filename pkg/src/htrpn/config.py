"""Run configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from htrpn.losses import LossWeights
from htrpn.pyramid import PyramidSpec
from htrpn.sampler import SampleConfig
from htrpn.simharness import SceneConfig
from htrpn.ternary import CombineOp

CONFIG_ENV = "HTRPN_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    trials: int = 10000
    m: int = 218
    image_size: tuple[int, int] = (800, 800)
    coverage_iou: float = 0.3
    rank_op: CombineOp = CombineOp.MAX
    stats_scenes: int = 1000
    losscheck_batches: int = 100
    oracle_batches: int = 1000
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    pyramid: PyramidSpec = field(default_factory=PyramidSpec.default)
    sample: SampleConfig = field(default_factory=SampleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    scene: SceneConfig = field(default_factory=SceneConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    seed: int = 0
    thre_cls: float = 0.75
    out_dir: Path | None = None

    def to_dict(self) -> dict[str, Any]:
        exp = self.experiment
        return {
            "seed": self.seed,
            "thre_cls": self.thre_cls,
            "pyramid": self.pyramid.to_dict(),
            "sample": {
                "batch_size": self.sample.batch_size,
                "positive_cap": self.sample.positive_cap,
                "strategy": self.sample.strategy.value,
            },
            "loss": self.loss.to_dict(),
            "scene": self.scene.to_dict(),
            "experiment": {
                "trials": exp.trials,
                "m": exp.m,
                "image_size": list(exp.image_size),
                "coverage_iou": exp.coverage_iou,
                "rank_op": exp.rank_op.value,
                "stats_scenes": exp.stats_scenes,
                "losscheck_batches": exp.losscheck_batches,
                "oracle_batches": exp.oracle_batches,
                "workers": exp.workers,
            },
        }


def _strip_notes(data: Any) -> Any:
    if isinstance(data, dict):
        return {k: _strip_notes(v) for k, v in data.items() if not k.startswith("_")}
    return data


def default_config_dict() -> dict[str, Any]:
    text = resources.files("htrpn").joinpath("default_config.json").read_text()
    return _strip_notes(json.loads(text))


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a config from a (possibly partial) dictionary layered on the defaults."""
    merged = _merge(default_config_dict(), _strip_notes(data))
    try:
        seed = int(merged["seed"])
        thre_cls = float(merged["thre_cls"])
        loss = dict(merged["loss"])
        loss_weights = LossWeights(
            alpha=float(loss.pop("alpha")),
            lam=float(loss.pop("lambda")),
            tau=float(loss.pop("tau")),
            phi=float(loss.pop("phi")),
            thre_cls=thre_cls,
        )
        loss.pop("thre_cls", None)
        if loss:
            raise ConfigError(f"unknown loss keys: {sorted(loss)}")
        scene = SceneConfig.from_dict({**merged["scene"], "thre_cls": thre_cls, "seed": seed})
        sample = SampleConfig(seed=seed, **merged["sample"])
        exp = dict(merged["experiment"])
        exp["image_size"] = tuple(int(v) for v in exp["image_size"])
        exp["rank_op"] = CombineOp(exp["rank_op"])
        experiment = ExperimentConfig(**exp)
        out_dir = merged.get("out_dir")
        return RunConfig(
            pyramid=PyramidSpec.from_dict(merged["pyramid"]),
            sample=sample,
            loss=loss_weights,
            scene=scene,
            experiment=experiment,
            seed=seed,
            thre_cls=thre_cls,
            out_dir=Path(out_dir) if out_dir else None,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load ``path``, else ``$HTRPN_CONFIG``, else the packaged defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return from_dict(data)


def with_overrides(cfg: RunConfig, **overrides: Any) -> RunConfig:
    """Apply command-line overrides; ``None`` values are ignored."""
    o = {k: v for k, v in overrides.items() if v is not None}
    exp_keys = {"trials", "m", "image_size", "coverage_iou", "rank_op", "workers", "stats_scenes"}
    exp_over = {k: o.pop(k) for k in list(o) if k in exp_keys}
    if "rank_op" in exp_over:
        exp_over["rank_op"] = CombineOp(exp_over["rank_op"])
    if "image_size" in exp_over:
        size = tuple(exp_over["image_size"])
        exp_over["image_size"] = size
        cfg = replace(cfg, scene=replace(cfg.scene, image_size=size))
    if exp_over:
        cfg = replace(cfg, experiment=replace(cfg.experiment, **exp_over))
    if "seed" in o:
        seed = int(o.pop("seed"))
        cfg = replace(
            cfg,
            seed=seed,
            scene=replace(cfg.scene, seed=seed),
            sample=replace(cfg.sample, seed=seed),
        )
    if "thre_cls" in o:
        t = float(o.pop("thre_cls"))
        cfg = replace(
            cfg,
            thre_cls=t,
            scene=replace(cfg.scene, thre_cls=t),
            loss=replace(cfg.loss, thre_cls=t),
        )
    loss_over = {k: float(o.pop(k)) for k in ("phi", "tau") if k in o}
    if loss_over:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_over))
    if "out_dir" in o:
        cfg = replace(cfg, out_dir=Path(o.pop("out_dir")))
    if o:
        raise ConfigError(f"unknown overrides: {sorted(o)}")
    return cfg
