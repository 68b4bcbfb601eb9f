"""Position-based elasto-plastic dough simulator.

The simulated dough is the ground-truth world: tool actions are executed here
to produce training episodes and to close the planning loop.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .config import SimConfig, WorkspaceConfig
from .errors import ActionError
from .geometry import farthest_point_indices, mean_spacing, min_spacing, perceive, radius_pairs
from .models import Action, ActionSequence, DoughState, Episode, PointCloud, ToolSpec
from .sdf import SdfShape
from .tool_registry import ToolRegistry
from .tool_scripts import PHASES, ActionContext, tool_groups, tool_particles, tool_shape

logger = logging.getLogger(__name__)

SHAPES = ("block", "cylinder", "blob")


def _inside(shape: str, pts: np.ndarray, dims: np.ndarray, yaw: float = 0.0) -> np.ndarray:
    if shape == "block":
        half = dims / 2.0
        return np.all(np.abs(pts[:, :2]) <= half[:2], axis=1) & (pts[:, 2] >= 0) & (pts[:, 2] <= dims[2])
    if shape == "cylinder":
        return (np.linalg.norm(pts[:, :2], axis=1) <= dims[0] / 2.0) & (pts[:, 2] >= 0) & (pts[:, 2] <= dims[2])
    # blob: ellipsoid with semi-axes dims resting on the floor
    c, s = np.cos(yaw), np.sin(yaw)
    lx = c * pts[:, 0] + s * pts[:, 1]
    ly = -s * pts[:, 0] + c * pts[:, 1]
    lz = pts[:, 2] - dims[2]
    return (lx / dims[0]) ** 2 + (ly / dims[1]) ** 2 + (lz / dims[2]) ** 2 <= 1.0


def make_dough(shape: str = "block", n: int = 300, seed: int = 0, cfg: Optional[SimConfig] = None) -> DoughState:
    """Sample a fresh dough of n particles filling the given shape.

    Args:
        shape: "block", "cylinder" or "blob" (a bulky random ellipsoid)
        n: Particle count (>= 8)
        seed: Seed for the shape and the sampling
        cfg: Simulator settings (dough_size is used by block and cylinder)

    Returns:
        DoughState at rest, with the rest graph built at 1.5x mean spacing
    """
    if shape not in SHAPES:
        raise ValueError(f"Unknown dough shape: {shape}")
    if n < 8:
        raise ValueError("a dough needs at least 8 particles")
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(seed)

    yaw = 0.0
    if shape == "blob":
        dims = np.array([rng.uniform(0.024, 0.032), rng.uniform(0.024, 0.032), rng.uniform(0.014, 0.018)])
        yaw = float(rng.uniform(0.0, np.pi))
        volume = 4.0 / 3.0 * np.pi * float(np.prod(dims))
        reach = max(dims[0], dims[1])
        lo, hi = np.array([-reach, -reach, 0.0]), np.array([reach, reach, 2 * dims[2]])
    else:
        dims = np.asarray(cfg.dough_size, dtype=np.float64)
        if shape == "block":
            volume = float(np.prod(dims))
        else:
            volume = np.pi * (dims[0] / 2.0) ** 2 * dims[2]
        lo = np.array([-dims[0] / 2.0, -dims[1] / 2.0, 0.0])
        hi = np.array([dims[0] / 2.0, dims[1] / 2.0, dims[2]])

    candidates = np.zeros((0, 3))
    while len(candidates) < 20 * n:
        pts = rng.uniform(lo, hi, size=(40 * n, 3))
        candidates = np.concatenate([candidates, pts[_inside(shape, pts, dims, yaw)]])
    positions = candidates[farthest_point_indices(candidates, n, rng)]

    spacing = mean_spacing(positions)
    pairs = radius_pairs(positions, 1.5 * spacing)
    rest = np.linalg.norm(positions[pairs[:, 1]] - positions[pairs[:, 0]], axis=1)
    return DoughState(
        positions=positions,
        velocities=np.zeros_like(positions),
        rest_pairs=pairs,
        rest_lengths=rest,
        particle_volume=volume / n,
        particle_diameter=min(0.8 * spacing, min_spacing(positions)),
    )


def _accumulate(n: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.stack([np.bincount(index, weights=values[:, k], minlength=n) for k in range(3)], axis=1)


def _project_tools(p: np.ndarray, tools: Sequence[SdfShape]) -> np.ndarray:
    for tool in tools:
        d = tool.sdf(p)
        inside = d < 0
        if np.any(inside):
            p = p.copy()
            p[inside] -= d[inside, None] * tool.gradient(p[inside])
    return p


def _clamp(p: np.ndarray, ws: WorkspaceConfig) -> np.ndarray:
    lo = np.array([-ws.half_width, -ws.half_width, 0.0])
    hi = np.array([ws.half_width, ws.half_width, ws.height])
    return np.clip(p, lo, hi)


def step_physics(
    state: DoughState,
    tools: Sequence[SdfShape],
    dt: float,
    cfg: Optional[SimConfig] = None,
    workspace: Optional[WorkspaceConfig] = None,
) -> DoughState:
    """Advance the dough by one position-based step.

    Predict, then iterate rest-length constraints, particle non-penetration,
    tool SDF projection and workspace clamping; finally apply plastic yield
    to the rest lengths and damp the velocities.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or SimConfig()
    ws = workspace or WorkspaceConfig()

    x = state.positions
    n = len(x)
    p = x + state.velocities * dt
    pairs = state.rest_pairs
    rest = state.rest_lengths.copy()
    i, j = pairs[:, 0], pairs[:, 1]
    inv_count = 1.0 / np.maximum(np.bincount(i, minlength=n) + np.bincount(j, minlength=n), 1)

    diameter = state.particle_diameter
    contact = radius_pairs(p, diameter) if n > 1 else np.zeros((0, 2), dtype=np.int64)
    ci, cj = contact[:, 0], contact[:, 1]
    inv_contact = 1.0 / np.maximum(np.bincount(ci, minlength=n) + np.bincount(cj, minlength=n), 1)

    for _ in range(cfg.iterations):
        if len(pairs):
            d = p[j] - p[i]
            length = np.linalg.norm(d, axis=1)
            corr = (0.5 * (length - rest) / np.maximum(length, 1e-12))[:, None] * d
            p = p + (_accumulate(n, i, corr) - _accumulate(n, j, corr)) * inv_count[:, None]
        if len(contact):
            d = p[cj] - p[ci]
            length = np.linalg.norm(d, axis=1)
            overlap = np.maximum(diameter - length, 0.0)
            corr = (0.5 * overlap / np.maximum(length, 1e-12))[:, None] * d
            p = p + (_accumulate(n, cj, corr) - _accumulate(n, ci, corr)) * inv_contact[:, None]
        p = _clamp(_project_tools(p, tools), ws)
    p = _clamp(_project_tools(p, tools), ws)

    if len(pairs):
        length = np.linalg.norm(p[j] - p[i], axis=1)
        ratio = length / np.maximum(rest, 1e-12)
        gamma = cfg.yield_ratio
        stretched = ratio > gamma
        compressed = ratio < 1.0 / gamma
        rest[stretched] = length[stretched] / gamma
        rest[compressed] = length[compressed] * gamma

    velocities = (p - x) / dt * (1.0 - cfg.damping)
    return DoughState(
        positions=p,
        velocities=velocities,
        rest_pairs=pairs,
        rest_lengths=rest,
        particle_volume=state.particle_volume,
        particle_diameter=state.particle_diameter,
    )


def validate_action(spec: ToolSpec, action: Action):
    """Raise ActionError unless action fits the tool's action space."""
    if action.tool != spec.id:
        raise ActionError(f"action is for '{action.tool}', not '{spec.id}'")
    if len(action.params) != len(spec.params):
        raise ActionError(f"{spec.id} takes {len(spec.params)} parameters, got {len(action.params)}")
    for p, v in zip(spec.params, action.params):
        if not (p.low - 1e-9 <= v <= p.high + 1e-9):
            raise ActionError(f"{spec.id}.{p.name}={v:.6g} outside [{p.low:.6g}, {p.high:.6g}]")


def random_action(tool: ToolSpec, seed) -> Action:
    """Uniform sample of every parameter."""
    rng = np.random.default_rng(seed)
    return Action(tool.id, rng.uniform(tool.lows, tool.highs))


def knife_split(state: DoughState, x: float, offset: float, workspace: Optional[WorkspaceConfig] = None) -> DoughState:
    """Cut the rest graph at plane x and shift the smaller part away by offset."""
    pos = state.positions.copy()
    left = pos[:, 0] <= x
    pairs = state.rest_pairs
    keep = left[pairs[:, 0]] == left[pairs[:, 1]]
    n_left = int(left.sum())
    if 0 < n_left < len(pos):
        if n_left <= len(pos) - n_left:
            pos[left, 0] -= offset
        else:
            pos[~left, 0] += offset
    pos = _clamp(pos, workspace or WorkspaceConfig())
    return DoughState(
        positions=pos,
        velocities=np.zeros_like(pos),
        rest_pairs=pairs[keep],
        rest_lengths=state.rest_lengths[keep],
        particle_volume=state.particle_volume,
        particle_diameter=state.particle_diameter,
    )


def cut_position_for_volume(state: DoughState, target_volume: float) -> float:
    """Plane x leaving target_volume of dough on its low-x side.

    Bisects from the dough center for the smallest x whose left-side particle
    count reaches the target, so the split is exact to one particle.

    Raises:
        ActionError: VOLUME_OUT_OF_RANGE unless 0 < target_volume < total
    """
    total = state.volume
    if not 0.0 < target_volume < total:
        raise ActionError(
            f"target volume {target_volume:.3g} outside (0, {total:.3g})",
            code="VOLUME_OUT_OF_RANGE",
        )
    xs = state.positions[:, 0]
    n = len(xs)
    k = int(np.clip(round(target_volume / total * n), 1, n - 1))

    center = float(xs.mean())
    if np.count_nonzero(xs <= center) >= k:
        lo, hi = float(xs.min()) - 1e-9, center
    else:
        lo, hi = center, float(xs.max())
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.count_nonzero(xs <= mid) >= k:
            hi = mid
        else:
            lo = mid
    return hi


def _clear_of_hull(positions: np.ndarray, tool: SdfShape, margin: float) -> bool:
    try:
        vertices = positions[ConvexHull(positions).vertices]
    except (QhullError, ValueError):
        vertices = positions
    return bool(np.all(tool.sdf(vertices) >= margin))


class Simulator:
    """Executes scripted tool actions on dough states."""

    def __init__(
        self,
        registry: ToolRegistry,
        cfg: Optional[SimConfig] = None,
        workspace: Optional[WorkspaceConfig] = None,
    ):
        self.registry = registry
        self.cfg = cfg or SimConfig()
        self.workspace = workspace or WorkspaceConfig()

    def frame_indices(self) -> np.ndarray:
        """Raw frame indices kept by the F-frame subsampling."""
        n_raw = PHASES * self.cfg.phase_frames + 1
        return np.round(np.linspace(0, n_raw - 1, self.cfg.frames)).astype(np.int64)

    def apply_action(self, state: DoughState, action: Action) -> Tuple[ActionSequence, DoughState]:
        """Run one action and return its subsampled frames plus the end state.

        Raises:
            ActionError: If the parameters fall outside the tool's action space
        """
        spec = self.registry.load(action.tool)
        validate_action(spec, action)
        local = self.registry.tool_points(spec.id)
        groups = np.concatenate([np.zeros(len(state.positions), dtype=np.int64), tool_groups(spec, local)])
        ctx = ActionContext.from_cloud(state.cloud(), self.cfg.roll_factor)

        n_raw = PHASES * self.cfg.phase_frames + 1
        progress = np.linspace(0.0, PHASES, n_raw)
        dt = self.cfg.frame_dt / self.cfg.substeps

        current = state.copy()
        recorded = current.positions.copy()
        was_clear = False
        raw_frames: List[PointCloud] = []
        for f, prog in enumerate(progress):
            shape = tool_shape(spec, action.params, prog, ctx)
            if f > 0:
                for _ in range(self.cfg.substeps):
                    current = step_physics(current, [shape], dt, self.cfg, self.workspace)
                if spec.script == "knife" and f == self.cfg.phase_frames:
                    current = knife_split(current, float(action.params[0]), self.cfg.knife_offset, self.workspace)

            clear = _clear_of_hull(current.positions, shape, self.cfg.contact_margin)
            if not (f > 0 and clear and was_clear):
                recorded = current.positions.copy()
            was_clear = clear

            tool_pts = tool_particles(spec, local, action.params, prog, ctx)
            raw_frames.append(PointCloud(np.concatenate([recorded, tool_pts]), groups=groups))

        frames = [raw_frames[k] for k in self.frame_indices()]
        return ActionSequence(action=action, frames=frames), current

    def run_episode(self, tool: str, n_seq: int, seed: int) -> Episode:
        """Reset a bulky dough and apply n_seq random actions of one tool."""
        if n_seq < 1:
            raise ValueError("an episode needs at least one sequence")
        spec = self.registry.load(tool)
        state = make_dough(self.cfg.reset_shape, self.cfg.n_particles, seed, self.cfg)
        rng = np.random.default_rng([seed, 1])
        episode = Episode(tool=tool)
        for _ in range(n_seq):
            action = random_action(spec, int(rng.integers(2**31)))
            sequence, state = self.apply_action(state, action)
            episode.sequences.append(sequence)
        logger.debug("Episode %s seed=%d: %d sequences", tool, seed, n_seq)
        return episode


class SimWorld:
    """A simulator plus the one dough it currently owns."""

    def __init__(self, simulator: Simulator, state: DoughState):
        self.simulator = simulator
        self.state = state

    def observe(self, n_points: int, seed: int = 0) -> PointCloud:
        """Resampled dough cloud with estimated normals."""
        return perceive(self.state.cloud(), n_points, seed=seed, normal_k=self.simulator.cfg.normal_k)

    def apply(self, action: Action) -> ActionSequence:
        sequence, self.state = self.simulator.apply_action(self.state, action)
        return sequence

    def perturb(self, fn) -> None:
        """Replace the dough state by fn(state) (an external deformation)."""
        self.state = fn(self.state)
