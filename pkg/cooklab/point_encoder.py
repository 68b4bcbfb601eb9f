"""Permutation-invariant encoder for pairs of dough clouds.

Both clouds are re-centered on the first cloud's centroid, scaled, tagged
0 (first) or 1 (second) and concatenated; a shared per-point MLP is followed
by a max-pool over points.
"""

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import surface_resample
from .models import PointCloud
from .nn import MLP, Module

INPUT_SCALE = 0.05  # meters mapped to unit input
IN_FEATURES = 4  # x, y, z, tag


def fixed_count(cloud: PointCloud, n_points: int, seed: int = 0) -> np.ndarray:
    """Positions of cloud resampled to exactly n_points."""
    if len(cloud) == n_points:
        return cloud.positions
    return surface_resample(cloud, n_points, seed).cloud.positions


def pair_inputs(first: np.ndarray, second: np.ndarray, scale: float = INPUT_SCALE) -> np.ndarray:
    """(2n, 4) per-point inputs of one (first, second) pair."""
    center = first.mean(axis=0)
    tagged = [
        np.hstack([(pts - center) / scale, np.full((len(pts), 1), tag)])
        for tag, pts in ((0.0, first), (1.0, second))
    ]
    return np.vstack(tagged)


def batch_inputs(firsts: Sequence[np.ndarray], seconds: Sequence[np.ndarray], scale: float = INPUT_SCALE) -> np.ndarray:
    """(B, 2n, 4) inputs of a batch of equal-size pairs."""
    return np.stack([pair_inputs(a, b, scale) for a, b in zip(firsts, seconds)])


class PointEncoder(Module):
    """Shared point MLP (ReLU after every layer) plus max-pool."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, in_features: int = IN_FEATURES):
        self.widths = list(widths)
        self.mlp = MLP([in_features] + self.widths, rng)

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    def __call__(self, inputs: np.ndarray) -> ad.Tensor:
        """(B, P, C) inputs -> (B, out_features) global features."""
        b, p, c = inputs.shape
        per_point = ad.relu(self.mlp(inputs.reshape(b * p, c)))
        return ad.tmax(per_point.reshape(b, p, self.out_features), axis=1)
