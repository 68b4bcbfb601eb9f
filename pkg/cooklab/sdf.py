"""Signed distance primitives for tool geometry.

Negative inside, positive outside, zero on the boundary. Every primitive is
exact, so each one is 1-Lipschitz; unions take the minimum of their members.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

PRIMITIVES = ("box", "cylinder", "capsule", "halfspace", "sphere", "union")


def yaw_matrix(theta: float) -> np.ndarray:
    """Rotation about the vertical axis."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class SdfShape:
    """Primitive (or union of primitives) placed by a rigid pose."""
    kind: str
    dims: Tuple[float, ...] = ()
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    children: List["SdfShape"] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in PRIMITIVES:
            raise ValueError(f"Unknown primitive: {self.kind}")
        self.dims = tuple(float(d) for d in self.dims)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance for an (n, 3) array of world points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.kind == "union":
            if not self.children:
                return np.full(len(points), np.inf)
            return np.min([child.sdf(points) for child in self.children], axis=0)
        local = (points - self.translation) @ self.rotation
        return _local_sdf(self.kind, self.dims, local)

    def gradient(self, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
        """Unit outward direction of steepest SDF ascent (central differences)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        grad = np.empty_like(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            grad[:, axis] = (self.sdf(points + step) - self.sdf(points - step)) / (2 * h)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        flat = norm[:, 0] < 1e-12
        grad[flat] = (0.0, 0.0, 1.0)
        norm[flat] = 1.0
        return grad / norm

    def transformed(self, yaw: float = 0.0, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "SdfShape":
        """Apply a yaw rotation then a translation, returning a new shape."""
        rot = yaw_matrix(yaw)
        offset = np.asarray(translation, dtype=np.float64)
        if self.kind == "union":
            return SdfShape("union", children=[c.transformed(yaw, translation) for c in self.children])
        return SdfShape(
            self.kind,
            self.dims,
            rotation=rot @ self.rotation,
            translation=rot @ self.translation + offset,
        )

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """World-frame axis-aligned bounding box."""
        if self.kind == "union":
            boxes = [c.bounds() for c in self.children]
            return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)
        if self.kind == "halfspace":
            return np.full(3, -np.inf), np.full(3, np.inf)
        half = _local_half_extents(self.kind, self.dims)
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * half
        world = corners @ self.rotation.T + self.translation
        return world.min(axis=0), world.max(axis=0)


def _local_half_extents(kind: str, dims: Tuple[float, ...]) -> np.ndarray:
    if kind == "sphere":
        return np.full(3, dims[0])
    if kind == "box":
        return np.array(dims[:3])
    if kind == "cylinder":
        radius, half_height = dims
        return np.array([radius, radius, half_height])
    if kind == "capsule":
        radius, half_length = dims
        return np.array([half_length + radius, radius, radius])
    raise ValueError(f"No bounds for {kind}")


def _local_sdf(kind: str, dims: Tuple[float, ...], q: np.ndarray) -> np.ndarray:
    if kind == "sphere":
        return np.linalg.norm(q, axis=1) - dims[0]
    if kind == "halfspace":
        return q[:, 2].copy()
    if kind == "box":
        d = np.abs(q) - np.asarray(dims[:3])
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside
    if kind == "cylinder":
        radius, half_height = dims
        d = np.stack([np.linalg.norm(q[:, :2], axis=1) - radius, np.abs(q[:, 2]) - half_height], axis=1)
        return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)
    if kind == "capsule":
        radius, half_length = dims
        nearest = np.zeros_like(q)
        nearest[:, 0] = np.clip(q[:, 0], -half_length, half_length)
        return np.linalg.norm(q - nearest, axis=1) - radius
    raise ValueError(f"Unknown primitive: {kind}")


def sdf_eval(shape: SdfShape, p) -> Union[float, np.ndarray]:
    """Signed distance of one point (scalar result) or many points (array)."""
    arr = np.asarray(p, dtype=np.float64)
    values = shape.sdf(arr)
    if arr.ndim == 1:
        return float(values[0])
    return values


def sphere(radius: float, center=(0.0, 0.0, 0.0)) -> SdfShape:
    return SdfShape("sphere", (radius,), translation=center)


def box(half_extents, center=(0.0, 0.0, 0.0), yaw: float = 0.0) -> SdfShape:
    return SdfShape("box", tuple(half_extents), rotation=yaw_matrix(yaw), translation=center)


def cylinder(radius: float, half_height: float, center=(0.0, 0.0, 0.0)) -> SdfShape:
    """Cylinder with a vertical axis."""
    return SdfShape("cylinder", (radius, half_height), translation=center)


def capsule(radius: float, half_length: float, center=(0.0, 0.0, 0.0), yaw: float = 0.0) -> SdfShape:
    """Horizontal capsule whose axis points along yaw."""
    return SdfShape("capsule", (radius, half_length), rotation=yaw_matrix(yaw), translation=center)


def halfspace(height: float = 0.0) -> SdfShape:
    """Solid below the plane z = height."""
    return SdfShape("halfspace", (), translation=(0.0, 0.0, height))


def union(*shapes: SdfShape) -> SdfShape:
    return SdfShape("union", children=list(shapes))
