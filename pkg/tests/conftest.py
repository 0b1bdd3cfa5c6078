import time

import numpy as np
import pytest

from htrpn.matcher import MatchResult, Status
from htrpn.simharness import SceneConfig, coverage_experiment

ACCEPTANCE_LINES: list[str] = []

LARGE_NOVEL = SceneConfig(novel_scale=(256.0, 512.0), image_size=(800, 800), seed=2024)


def make_match(pool_sizes, status=Status.NEGATIVE) -> MatchResult:
    """A MatchResult whose every anchor has ``status``, with the given per-level counts."""
    levels = np.concatenate(
        [np.full(n, lv, dtype=np.int8) for lv, n in enumerate(pool_sizes)]
    ) if sum(pool_sizes) else np.empty(0, dtype=np.int8)
    n = len(levels)
    return MatchResult(
        iou=np.zeros(n),
        best_gt=np.full(n, -1),
        status=np.full(n, status, dtype=np.int8),
        levels=levels,
        num_levels=len(pool_sizes),
    )


@pytest.fixture(scope="session")
def large_regime_run():
    """10,000 paired coverage trials in the large-novel-object regime, timed."""
    start = time.perf_counter()
    report = coverage_experiment(LARGE_NOVEL, trials=10_000)
    return report, time.perf_counter() - start


@pytest.fixture(scope="session")
def large_regime_report(large_regime_run):
    return large_regime_run[0]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
