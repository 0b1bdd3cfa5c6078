"""Training-batch selection: capped positives plus random or level-balanced negatives.

Seeds may be an ``int`` or a :class:`numpy.random.Generator`; the same seed
always yields the same draw. Within :func:`sample_batch` positives are drawn
first from the seeded stream, so two strategies run with the same seed share
their positives and differ only in the negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from htrpn.matcher import MatchResult, Status

Seed = int | np.random.Generator | np.random.SeedSequence


class Strategy(str, Enum):
    RANDOM = "random"
    HSAMP = "hsamp"


@dataclass(frozen=True)
class SampleConfig:
    batch_size: int = 256
    positive_cap: int = 128
    strategy: Strategy = Strategy.HSAMP
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 0 or self.positive_cap < 0:
            raise ValueError("batch_size and positive_cap must be non-negative")
        if self.positive_cap > self.batch_size:
            raise ValueError(
                f"positive_cap ({self.positive_cap}) exceeds batch_size ({self.batch_size})"
            )
        object.__setattr__(self, "strategy", Strategy(self.strategy))


@dataclass(frozen=True)
class SampledBatch:
    positives: np.ndarray
    negatives: np.ndarray
    negatives_per_level: tuple[int, ...]

    @property
    def ids(self) -> np.ndarray:
        """Positives followed by negatives; the order labels are reported in."""
        return np.concatenate([self.positives, self.negatives])

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    if k >= len(pool):
        return pool.copy()
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(pool, size=k, replace=False)


def hsamp_quotas(m: int, pool_sizes: list[int]) -> list[int]:
    """Per-level negative counts for a level-balanced draw of ``m``.

    Each level starts at ``m // L``; the remainder goes one apiece to the
    lowest levels. Quota a level cannot fill is handed out one at a time,
    cycling from the lowest level, to levels that still have room.
    """
    if m < 0:
        raise ValueError(f"m must be non-negative, got {m}")
    n_levels = len(pool_sizes)
    base, rem = divmod(m, n_levels)
    wanted = [base + (1 if i < rem else 0) for i in range(n_levels)]
    quotas = [min(w, p) for w, p in zip(wanted, pool_sizes)]
    deficit = min(m, sum(pool_sizes)) - sum(quotas)
    i = 0
    while deficit > 0:
        if quotas[i] < pool_sizes[i]:
            quotas[i] += 1
            deficit -= 1
        i = (i + 1) % n_levels
    return quotas


def per_level_counts(match: MatchResult, ids: np.ndarray) -> tuple[int, ...]:
    return tuple(np.bincount(match.levels[ids], minlength=match.num_levels).tolist())


def sample_random(match: MatchResult, m: int, seed: Seed) -> np.ndarray:
    """Uniform draw of ``min(m, pool)`` Negative anchors across all levels."""
    if m < 0:
        raise ValueError(f"m must be non-negative, got {m}")
    pool = match.ids_with(Status.NEGATIVE)
    return _draw(_rng(seed), pool, m)


def sample_hsamp(match: MatchResult, m: int, seed: Seed) -> np.ndarray:
    """Level-balanced draw of Negative anchors (see :func:`hsamp_quotas`)."""
    rng = _rng(seed)
    pools = match.level_pools(Status.NEGATIVE)
    quotas = hsamp_quotas(m, [len(p) for p in pools])
    drawn = [_draw(rng, pool, q) for pool, q in zip(pools, quotas)]
    return np.concatenate(drawn) if drawn else np.empty(0, dtype=np.int64)


def sample_negatives(match: MatchResult, m: int, strategy: Strategy, seed: Seed) -> np.ndarray:
    if Strategy(strategy) is Strategy.HSAMP:
        return sample_hsamp(match, m, seed)
    return sample_random(match, m, seed)


def sample_batch(match: MatchResult, cfg: SampleConfig, seed: Seed | None = None) -> SampledBatch:
    """Select the training batch for one image.

    Args:
        match: Anchor statuses for the image.
        cfg: Batch size, positive cap and negative strategy.
        seed: Overrides ``cfg.seed`` when given.
    """
    rng = _rng(cfg.seed if seed is None else seed)
    active = match.ids_with(Status.ACTIVE)
    positives = _draw(rng, active, min(len(active), cfg.positive_cap))
    negatives = sample_negatives(match, cfg.batch_size - len(positives), cfg.strategy, rng)
    return SampledBatch(
        positives=positives,
        negatives=negatives,
        negatives_per_level=per_level_counts(match, negatives),
    )
