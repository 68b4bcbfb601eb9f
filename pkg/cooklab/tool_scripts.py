"""Scripted tool trajectories.

An action runs in three phases (approach, work, release). ``part_poses`` maps
an action and a progress value in [0, 3] to a (yaw, translation) pose per tool
part. The arithmetic goes through an ``ops`` namespace so the same script runs
on floats for the simulator and on autodiff tensors for gradient planning.
"""

from dataclasses import dataclass
from types import SimpleNamespace
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .models import PointCloud, ToolPart, ToolSpec
from .sdf import SdfShape, union
from .tool_registry import part_shape

PHASES = 3
START_HEIGHT = 0.07  # tool bottom before descending and after retracting
FLOOR_CLEARANCE = 0.001

NUMPY_OPS = SimpleNamespace(sin=np.sin, cos=np.cos, stack=np.stack)
AUTODIFF_OPS = SimpleNamespace(sin=ad.sin, cos=ad.cos, stack=ad.stack)


@dataclass
class ActionContext:
    """Dough quantities an action script is anchored to (fixed per action)."""
    centroid: np.ndarray
    diameter: float
    top: float
    roll_factor: float = 1.5

    @classmethod
    def from_cloud(cls, dough: PointCloud, roll_factor: float = 1.5) -> "ActionContext":
        pts = dough.positions
        centroid = pts.mean(axis=0)
        radial = np.linalg.norm(pts[:, :2] - centroid[:2], axis=1)
        return cls(centroid=centroid, diameter=2.0 * float(radial.max()), top=float(pts[:, 2].max()), roll_factor=roll_factor)


def _bottom_offset(part: ToolPart) -> float:
    """Distance from a part's center to its lowest point."""
    if part.primitive == "cylinder":
        return part.dims[1]
    if part.primitive == "box":
        return part.dims[2]
    return part.dims[0]


def _inner_offset(part: ToolPart) -> float:
    """Half thickness of a finger along the closing axis."""
    return part.dims[0]


def _lerp(a, b, s: float):
    return a + (b - a) * s


def _phase(progress: float) -> Tuple[int, float]:
    progress = float(np.clip(progress, 0.0, PHASES))
    phase = min(int(progress), PHASES - 1)
    return phase, progress - phase


def _param(spec: ToolSpec, params, name: str, default=0.0):
    names = spec.param_names
    return params[names.index(name)] if name in names else default


def part_poses(spec: ToolSpec, params: Sequence, progress: float, ctx: ActionContext, ops=NUMPY_OPS) -> List[Tuple]:
    """Pose (yaw, translation) of each tool part at the given progress."""
    phase, s = _phase(progress)
    script = spec.script

    if script == "gripper":
        r, theta, d = (_param(spec, params, n) for n in ("r", "theta", "d"))
        d_open = float(spec.extra.get("open_aperture", spec.params[2].high + 0.01))
        c, sn = ops.cos(theta), ops.sin(theta)
        mid_x = ctx.centroid[0] - r * sn
        mid_y = ctx.centroid[1] + r * c
        bottom = _lerp(START_HEIGHT, FLOOR_CLEARANCE, s) if phase == 0 else FLOOR_CLEARANCE
        if phase == 0:
            aperture = d_open
        elif phase == 1:
            aperture = _lerp(d_open, d, s)
        else:
            aperture = _lerp(d, d_open, s)
        poses = []
        for k, part in enumerate(spec.parts):
            sign = 1.0 if k == 0 else -1.0
            reach = sign * (aperture * 0.5 + _inner_offset(part))
            z = bottom + _bottom_offset(part)
            poses.append((theta, ops.stack([mid_x + reach * c, mid_y + reach * sn, z])))
        return poses

    if script == "press":
        x, y, z = (_param(spec, params, n) for n in ("x", "y", "z"))
        theta = _param(spec, params, "theta", 0.0)
        if phase == 0:
            bottom = _lerp(START_HEIGHT, z, s)
        elif phase == 1:
            bottom = z
        else:
            bottom = _lerp(z, START_HEIGHT, s)
        part = spec.parts[0]
        return [(theta, ops.stack([x, y, bottom + _bottom_offset(part)]))]

    if script == "roller":
        x, y, z, theta = (_param(spec, params, n) for n in ("x", "y", "z", "theta"))
        half = 0.5 * ctx.roll_factor * ctx.diameter
        nx, ny = -ops.sin(theta), ops.cos(theta)
        if phase == 0:
            travel, bottom = -half, _lerp(START_HEIGHT, z, s)
        elif phase == 1:
            travel, bottom = _lerp(-half, half, s), z
        else:
            travel, bottom = half, _lerp(z, START_HEIGHT, s)
        part = spec.parts[0]
        return [(theta, ops.stack([x + travel * nx, y + travel * ny, bottom + _bottom_offset(part)]))]

    if script == "knife":
        x, y = (_param(spec, params, n) for n in ("x", "y"))
        if phase == 0:
            bottom = _lerp(START_HEIGHT, 0.0, s)
        elif phase == 1:
            bottom = 0.0
        else:
            bottom = _lerp(0.0, START_HEIGHT, s)
        part = spec.parts[0]
        return [(0.0, ops.stack([x, y, bottom + _bottom_offset(part)]))]

    raise ValueError(f"Unknown tool script: {script}")


def place_points(local: np.ndarray, yaw, translation, ops=NUMPY_OPS):
    """Rotate local points by yaw about z, then translate."""
    c, s = ops.cos(yaw), ops.sin(yaw)
    px = local[:, 0] * c - local[:, 1] * s + translation[0]
    py = local[:, 0] * s + local[:, 1] * c + translation[1]
    pz = local[:, 2] + translation[2]
    return ops.stack([px, py, pz], axis=1)


def tool_particles(spec: ToolSpec, local_points: List[np.ndarray], params, progress: float, ctx: ActionContext, ops=NUMPY_OPS):
    """Tool particle positions (concatenated over parts) at a progress value."""
    poses = part_poses(spec, params, progress, ctx, ops)
    placed = [place_points(pts, yaw, t, ops) for pts, (yaw, t) in zip(local_points, poses)]
    if ops is NUMPY_OPS:
        return np.concatenate(placed, axis=0)
    return ad.concat(placed, axis=0)


def tool_groups(spec: ToolSpec, local_points: List[np.ndarray]) -> np.ndarray:
    """Group label (part index + 1) of every tool particle."""
    return np.concatenate([np.full(len(pts), k + 1, dtype=np.int64) for k, pts in enumerate(local_points)])


def tool_shape(spec: ToolSpec, params, progress: float, ctx: ActionContext) -> SdfShape:
    """World-frame SDF of the whole tool at a progress value."""
    poses = part_poses(spec, np.asarray(params, dtype=np.float64), progress, ctx)
    shapes = [part_shape(part).transformed(float(yaw), np.asarray(t, dtype=np.float64)) for part, (yaw, t) in zip(spec.parts, poses)]
    return shapes[0] if len(shapes) == 1 else union(*shapes)
