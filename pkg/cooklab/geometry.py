"""Point-cloud sampling, filtering and spatial queries."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.neighbors import NearestNeighbors

from .models import PointCloud
from .sdf import SdfShape

logger = logging.getLogger(__name__)

# offsets of the 27 cells around (and including) a grid cell
_CELL_OFFSETS = np.array([[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])


@dataclass
class ResampleResult:
    """Fixed-count resampling output."""
    cloud: PointCloud
    indices: np.ndarray
    repeated: bool = False


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Groups are kept by majority vote inside the voxel (ties go to the lower
    label); normals are averaged and renormalized.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud

    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = len(counts)

    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, cloud.positions)
    positions = sums / counts[:, None]

    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((n_vox, 3))
        np.add.at(nsum, inverse, cloud.normals)
        length = np.linalg.norm(nsum, axis=1, keepdims=True)
        first = np.zeros(n_vox, dtype=np.int64)
        first[inverse[::-1]] = np.arange(len(inverse))[::-1]
        normals = np.where(length > 1e-12, nsum / np.maximum(length, 1e-12), cloud.normals[first])

    groups = None
    if cloud.groups is not None:
        labels, label_index = np.unique(cloud.groups, return_inverse=True)
        votes = np.zeros((n_vox, len(labels)), dtype=np.int64)
        np.add.at(votes, (inverse, label_index.reshape(-1)), 1)
        groups = labels[np.argmax(votes, axis=1)]

    return PointCloud(positions, normals, groups)


def farthest_point_indices(positions: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy max-min selection of k distinct indices.

    Starts from the point farthest from the centroid; ties are broken by a
    seeded permutation so the result is deterministic for a given generator.
    """
    n = len(positions)
    k = min(k, n)
    order = rng.permutation(n)
    pts = positions[order]
    first = int(np.argmax(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    selected = np.empty(k, dtype=np.int64)
    selected[0] = first
    min_dist = np.sum((pts - pts[first]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        min_dist = np.minimum(min_dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return order[selected]


def surface_resample(cloud: PointCloud, k: int, seed: int = 0) -> ResampleResult:
    """Pick exactly k input points with blue-noise spacing.

    When the cloud holds fewer than k points every point is used once and the
    remainder is filled with seeded repeats; the result is then flagged.
    """
    if len(cloud) < 1 or k < 1:
        raise ValueError("surface_resample needs a non-empty cloud and k >= 1")
    rng = np.random.default_rng(seed)
    indices = farthest_point_indices(cloud.positions, k, rng)
    repeated = False
    if k > len(cloud):
        logger.warning("Resampling %d points from a %d-point cloud; repeating points", k, len(cloud))
        extra = rng.choice(len(cloud), size=k - len(cloud), replace=True)
        indices = np.concatenate([indices, extra])
        repeated = True
    return ResampleResult(cloud.subset(indices), indices, repeated)


def _cell_keys(cells: np.ndarray, dims: np.ndarray) -> np.ndarray:
    return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]


def radius_pairs(positions: np.ndarray, radius: float) -> np.ndarray:
    """All index pairs (i < j) with |x_i - x_j| <= radius, via a uniform hash grid.

    Cell size equals the radius, so only the 27 surrounding cells are searched.
    Returns an (m, 2) array sorted lexicographically.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)

    cells = np.floor(positions / radius).astype(np.int64)
    cells -= cells.min(axis=0) - 1
    dims = cells.max(axis=0) + 2
    keys = _cell_keys(cells, dims)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    found_i, found_j = [], []
    r2 = radius * radius
    for off in _CELL_OFFSETS:
        neighbor = _cell_keys(cells + off, dims)
        lo = np.searchsorted(sorted_keys, neighbor, side="left")
        hi = np.searchsorted(sorted_keys, neighbor, side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        src = np.repeat(np.arange(n), counts)
        starts = np.repeat(lo, counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        dst = order[starts + within]
        keep = src < dst
        src, dst = src[keep], dst[keep]
        d2 = np.sum((positions[src] - positions[dst]) ** 2, axis=1)
        close = d2 <= r2
        found_i.append(src[close])
        found_j.append(dst[close])

    if not found_i:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.stack([np.concatenate(found_i), np.concatenate(found_j)], axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return pairs


def radius_neighbors(cloud: PointCloud, radius: float) -> List[np.ndarray]:
    """Symmetric adjacency lists of the fixed-radius neighbour graph."""
    pairs = radius_pairs(cloud.positions, radius)
    return adjacency_from_pairs(len(cloud), pairs)


def adjacency_from_pairs(n: int, pairs: np.ndarray) -> List[np.ndarray]:
    both = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else np.zeros((0, 2), dtype=np.int64)
    both = both[np.lexsort((both[:, 1], both[:, 0]))]
    splits = np.searchsorted(both[:, 0], np.arange(1, n))
    return [np.asarray(a, dtype=np.int64) for a in np.split(both[:, 1], splits)]


def component_count(n: int, pairs: np.ndarray) -> int:
    """Number of connected components of an undirected pair graph."""
    if n == 0:
        return 0
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    count, _ = connected_components(graph, directed=False)
    return int(count)


def mean_spacing(positions: np.ndarray) -> float:
    """Mean nearest-neighbour distance."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        return 0.0
    nn = NearestNeighbors(n_neighbors=2).fit(positions)
    dist, _ = nn.kneighbors(positions)
    return float(dist[:, 1].mean())


def min_spacing(positions: np.ndarray) -> float:
    positions = np.asarray(positions, dtype=np.float64)
    nn = NearestNeighbors(n_neighbors=2).fit(positions)
    dist, _ = nn.kneighbors(positions)
    return float(dist[:, 1].min())


def sdf_projection(points: np.ndarray, shape: SdfShape) -> np.ndarray:
    """Move points inside the shape onto its surface along the SDF gradient."""
    d = shape.sdf(points)
    inside = d < 0
    if not np.any(inside):
        return points
    out = points.copy()
    out[inside] -= d[inside, None] * shape.gradient(points[inside])
    return out


def remove_penetrating(cloud: PointCloud, tool: SdfShape, tolerance: float = 1e-6) -> PointCloud:
    """Drop points inside the tool (sdf < -tolerance)."""
    if len(cloud) == 0:
        return cloud
    return cloud.subset(tool.sdf(cloud.positions) >= -tolerance)


def estimate_normals(cloud: PointCloud, k: int = 8) -> np.ndarray:
    """Unit normals from the smallest local covariance eigenvector.

    Normals are oriented away from the cloud centroid. Neighbourhoods of rank
    below two fall back to the radial direction.
    """
    n = len(cloud)
    if k < 3 or n < k:
        raise ValueError(f"estimate_normals needs |cloud| >= k >= 3 (got {n}, k={k})")
    pts = cloud.positions
    nn = NearestNeighbors(n_neighbors=k).fit(pts)
    _, idx = nn.kneighbors(pts)
    hood = pts[idx]
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]

    radial = pts - pts.mean(axis=0)
    radial_len = np.linalg.norm(radial, axis=1, keepdims=True)
    radial = np.where(radial_len > 1e-12, radial / np.maximum(radial_len, 1e-12), np.array([0.0, 0.0, 1.0]))

    degenerate = eigvals[:, 1] <= 1e-10 * np.maximum(eigvals[:, 2], 1e-30)
    normals[degenerate] = radial[degenerate]

    flip = np.sum(normals * radial, axis=1) < 0
    normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def sample_surface(shape: SdfShape, k: int, rng: np.random.Generator, candidates: int = 20000) -> np.ndarray:
    """Blue-noise points on the zero set of a bounded shape."""
    lo, hi = shape.bounds()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("cannot sample the surface of an unbounded shape")
    margin = 0.05 * np.max(hi - lo)
    pts = rng.uniform(lo - margin, hi + margin, size=(candidates, 3))
    for _ in range(3):
        pts = pts - shape.sdf(pts)[:, None] * shape.gradient(pts)
    on_surface = pts[np.abs(shape.sdf(pts)) < 1e-6]
    return on_surface[farthest_point_indices(on_surface, k, rng)]


def perceive(
    cloud: PointCloud,
    n_points: int,
    seed: int = 0,
    tools: Optional[Sequence[SdfShape]] = None,
    voxel: Optional[float] = None,
    normal_k: int = 8,
) -> PointCloud:
    """Observation pipeline: voxel filter, tool-penetration removal,
    fixed-count resampling and normal estimation."""
    obs = cloud.dough()
    if voxel:
        obs = voxel_downsample(obs, voxel)
    for tool in tools or []:
        obs = remove_penetrating(obs, tool)
    if len(obs) == 0:
        raise ValueError("nothing left to observe")
    if len(obs) != n_points:
        obs = surface_resample(obs, n_points, seed).cloud
    return obs.with_normals(estimate_normals(obs, min(normal_k, len(obs))))
