"""Point-cloud distances: Chamfer, exact earth mover's, and their combination.

Chamfer uses squared Euclidean costs, EMD unsquared ones. All reported values
are sums over points; ``metric_report`` adds per-point means next to them.
"""

from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .errors import GeometryError
from .models import EmdResult, LossWeights, PointCloud

CloudLike = Union[PointCloud, np.ndarray]


def _positions(cloud: CloudLike) -> np.ndarray:
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("point cloud is empty", code="EMPTY_CLOUD")
    return pts


def nearest_indices(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into dst of the nearest point for every point of src."""
    _, idx = cKDTree(dst).query(src, k=1)
    return np.asarray(idx, dtype=np.int64)


def _directed_sq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distances are recomputed from the matched points so both directions
    # round identically regardless of the tree's internal arithmetic
    idx = nearest_indices(src, dst)
    return np.sum((src - dst[idx]) ** 2, axis=1)


def chamfer_terms(a: CloudLike, b: CloudLike) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point squared nearest distances a->b and b->a."""
    pa, pb = _positions(a), _positions(b)
    return _directed_sq(pa, pb), _directed_sq(pb, pa)


def chamfer(a: CloudLike, b: CloudLike) -> float:
    """Sum of squared nearest-neighbour distances in both directions.

    Raises:
        GeometryError: EMPTY_CLOUD if either cloud has no points
    """
    ab, ba = chamfer_terms(a, b)
    return float(np.sum(ab)) + float(np.sum(ba))


def emd_exact(a: CloudLike, b: CloudLike) -> EmdResult:
    """Minimal-cost bijection between two equal-size clouds.

    Raises:
        GeometryError: EMPTY_CLOUD or SIZE_MISMATCH
    """
    pa, pb = _positions(a), _positions(b)
    if len(pa) != len(pb):
        raise GeometryError(f"EMD needs equal sizes, got {len(pa)} and {len(pb)}", code="SIZE_MISMATCH")
    cost = cdist(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(len(pa), dtype=np.int64)
    assignment[rows] = cols
    return EmdResult(cost=float(cost[rows, cols].sum()), assignment=assignment)


def combined_loss(a: CloudLike, b: CloudLike, w: Optional[LossWeights] = None) -> float:
    """w1 * chamfer + w2 * EMD."""
    w = w or LossWeights()
    total = 0.0
    if w.w1:
        total += w.w1 * chamfer(a, b)
    if w.w2:
        total += w.w2 * emd_exact(a, b).cost
    return total


def normal_chamfer(a: PointCloud, b: PointCloud) -> float:
    """Chamfer sum where each nearest-position pair costs |n_a - n_b|^2.

    Raises:
        GeometryError: NO_NORMALS if either cloud lacks normals
    """
    if a.normals is None or b.normals is None:
        raise GeometryError("normal Chamfer needs normals on both clouds", code="NO_NORMALS")
    pa, pb = _positions(a), _positions(b)
    ab = np.sum((a.normals - b.normals[nearest_indices(pa, pb)]) ** 2, axis=1)
    ba = np.sum((b.normals - a.normals[nearest_indices(pb, pa)]) ** 2, axis=1)
    return float(np.sum(ab)) + float(np.sum(ba))


def metric_report(a: PointCloud, b: PointCloud, w: Optional[LossWeights] = None) -> Dict[str, Dict[str, float]]:
    """Sum and per-point mean of every metric between two clouds."""
    w = w or LossWeights()
    ab, ba = chamfer_terms(a, b)
    report = {
        "chamfer": {
            "sum": float(np.sum(ab)) + float(np.sum(ba)),
            "mean": float(np.mean(ab)) + float(np.mean(ba)),
        },
    }
    if len(a) == len(b):
        emd = emd_exact(a, b).cost
        report["emd"] = {"sum": emd, "mean": emd / len(a)}
        report["combined"] = {
            "sum": w.w1 * report["chamfer"]["sum"] + w.w2 * emd,
            "mean": w.w1 * report["chamfer"]["mean"] + w.w2 * emd / len(a),
        }
    if a.normals is not None and b.normals is not None:
        total = normal_chamfer(a, b)
        report["normal_chamfer"] = {"sum": total, "mean": total / (0.5 * (len(a) + len(b)))}
    return report


# Differentiable versions used as training and planning losses. Matchings are
# computed on the current values and held constant through the backward pass.

def chamfer_tensor(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    target = np.asarray(target)
    fwd = nearest_indices(pred.data.astype(np.float64), target.astype(np.float64))
    bwd = nearest_indices(target.astype(np.float64), pred.data.astype(np.float64))
    term_ab = ad.square(pred - target[fwd]).sum()
    term_ba = ad.square(ad.gather(pred, bwd) - target).sum()
    return term_ab + term_ba


def emd_tensor(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    target = np.asarray(target)
    cost = cdist(pred.data.astype(np.float64), target.astype(np.float64))
    rows, cols = linear_sum_assignment(cost)
    diff = ad.gather(pred, rows) - target[cols]
    return ad.sqrt(ad.square(diff).sum(axis=1) + 1e-12).sum()


def point_cloud_loss(pred: ad.Tensor, target: np.ndarray, w: Optional[LossWeights] = None) -> ad.Tensor:
    """Differentiable combined loss of a predicted (n, 3) tensor.

    A non-finite prediction has no matching; its loss (and gradient) is NaN.
    """
    w = w or LossWeights()
    if not np.all(np.isfinite(pred.data)):
        return pred.sum() * np.nan
    loss = ad.Tensor(0.0)
    if w.w1:
        loss = loss + w.w1 * chamfer_tensor(pred, target)
    if w.w2:
        loss = loss + w.w2 * emd_tensor(pred, target)
    return loss
