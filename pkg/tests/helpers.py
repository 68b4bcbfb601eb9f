"""Small simulated datasets shared by the model tests."""

import functools
import os

import numpy as np

from cooklab.config import SimConfig
from cooklab.models import PointCloud
from cooklab.simulator import Simulator
from cooklab.tool_registry import ToolRegistry

SLOW = os.getenv("COOKLAB_SLOW_TESTS") == "1"
TINY_SIM = SimConfig(n_particles=40, reset_shape="block")


@functools.lru_cache(maxsize=None)
def registry() -> ToolRegistry:
    return ToolRegistry()


@functools.lru_cache(maxsize=None)
def episodes(tool: str, count: int = 2, n_seq: int = 1, seed: int = 0):
    """count episodes of one tool on 40-particle blocks."""
    sim = Simulator(registry(), TINY_SIM)
    return tuple(sim.run_episode(tool, n_seq, seed + k) for k in range(count))


def blob(n: int, axes=(0.02, 0.02, 0.01), seed: int = 0, yaw: float = 0.0) -> PointCloud:
    """Points filling an ellipsoid resting on the floor."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        p = rng.uniform(-1.0, 1.0, size=3)
        if np.sum(p ** 2) <= 1.0:
            pts.append(p)
    pts = np.array(pts) * np.asarray(axes)
    c, s = np.cos(yaw), np.sin(yaw)
    xy = pts[:, :2] @ np.array([[c, s], [-s, c]])
    return PointCloud(np.column_stack([xy, pts[:, 2] + axes[2]]))
