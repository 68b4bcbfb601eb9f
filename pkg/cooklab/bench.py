"""Timing harness: median wall time of the hot paths."""

import csv
import io
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dynamics import DynModel, rollout
from .geometry import radius_neighbors
from .graph import default_radius
from .metrics import emd_exact
from .models import Action, PointCloud
from .simulator import make_dough
from .tool_registry import ToolRegistry

logger = logging.getLogger(__name__)

SUITES = ("emd", "neighbors", "rollout")
REPEATS = 10


def median_time(fn: Callable[[], object], repeats: int = REPEATS) -> float:
    """Median seconds of repeats calls after one warm-up call."""
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def _emd_case(seed: int, n: int = 300) -> Callable[[], object]:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    return lambda: emd_exact(a, b)


def _neighbors_case(seed: int, n: int = 10_000) -> Callable[[], object]:
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(-0.05, 0.05, size=(n, 3)))
    radius = default_radius(cloud.positions)
    return lambda: radius_neighbors(cloud, radius)


def _rollout_case(seed: int, registry: ToolRegistry, steps: int = 15, tool: str = "press_circle") -> Callable[[], object]:
    spec = registry.load(tool)
    local = registry.tool_points(tool)
    dough = make_dough("block", 300, seed)
    cloud = PointCloud(dough.positions)
    model = DynModel(radius=default_radius(dough.positions), tool=tool, seed=seed)
    n_actions = -(-steps // model.steps_per_action)
    actions = [Action(tool, 0.5 * (spec.lows + spec.highs))] * n_actions
    return lambda: rollout(model, cloud, spec, local, actions, steps)


def run_bench(
    suites: Sequence[str] = SUITES,
    seed: int = 0,
    repeats: int = REPEATS,
    registry: Optional[ToolRegistry] = None,
) -> List[Dict[str, object]]:
    """Median timings of the chosen suites.

    Returns:
        Rows with suite, size and median seconds
    """
    rows = []
    for suite in suites:
        if suite == "emd":
            fn, size = _emd_case(seed), 300
        elif suite == "neighbors":
            fn, size = _neighbors_case(seed), 10_000
        elif suite == "rollout":
            fn, size = _rollout_case(seed, registry or ToolRegistry()), 15
        else:
            raise ValueError(f"unknown bench suite '{suite}'")
        seconds = median_time(fn, repeats)
        logger.info("bench %s (n=%d): %.4fs", suite, size, seconds)
        rows.append({"suite": suite, "n": size, "repeats": repeats, "median_s": seconds})
    return rows


def to_csv(rows: List[Dict[str, object]]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=["suite", "n", "repeats", "median_s"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "median_s": f"{row['median_s']:.6f}"})
    return out.getvalue()
