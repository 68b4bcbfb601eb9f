"""Data models for the dough manipulation toolkit."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import GeometryError

DOUGH = 0  # group label; tool parts are labelled 1..k


@dataclass
class PointCloud:
    """Particle positions with optional unit normals and group labels."""
    positions: np.ndarray  # (n, 3) meters, workspace frame
    normals: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None  # (n,) DOUGH or tool part index

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("point positions must be finite", code="NON_FINITE")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.positions):
                raise GeometryError("normals length differs from positions", code="SIZE_MISMATCH")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64).reshape(-1)
            if len(self.groups) != len(self.positions):
                raise GeometryError("groups length differs from positions", code="SIZE_MISMATCH")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def subset(self, index) -> "PointCloud":
        """Select points by index array or boolean mask."""
        return PointCloud(
            positions=self.positions[index],
            normals=None if self.normals is None else self.normals[index],
            groups=None if self.groups is None else self.groups[index],
        )

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.positions + np.asarray(offset, dtype=np.float64), self.normals, self.groups)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions, normals, self.groups)

    def dough(self) -> "PointCloud":
        """Dough particles only (everything when unlabelled)."""
        if self.groups is None:
            return self
        return self.subset(self.groups == DOUGH)

    def tool(self) -> "PointCloud":
        if self.groups is None:
            return PointCloud(np.zeros((0, 3)))
        return self.subset(self.groups != DOUGH)

    @staticmethod
    def concat(clouds: List["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        normals = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        groups = None
        if all(c.groups is not None for c in clouds):
            groups = np.concatenate([c.groups for c in clouds])
        return PointCloud(np.concatenate([c.positions for c in clouds]), normals, groups)


@dataclass
class EmdResult:
    """Exact earth mover's result: summed cost and the matching bijection."""
    cost: float
    assignment: np.ndarray  # assignment[i] = index in b matched to a[i]


@dataclass
class LossWeights:
    """Weights of the Chamfer and EMD terms of the combined loss."""
    w1: float = 0.5
    w2: float = 0.5

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")


class ParamKind(Enum):
    """Kind of an action parameter."""
    TRANSLATION = "translation"
    ROTATION = "rotation"
    APERTURE = "aperture"


@dataclass
class ParamSpec:
    """One bounded action parameter."""
    name: str
    kind: ParamKind
    low: float
    high: float
    bins: Optional[int] = None  # None: per-kind default of the policy config


@dataclass
class ToolPart:
    """Rigid primitive making up part of a tool, in the tool's local frame."""
    name: str
    primitive: str  # box | cylinder | capsule | sphere
    dims: List[float]
    offset: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class ToolSpec:
    """A tool's geometry and parameterized action space."""
    id: str
    category: str  # "A" (learned dynamics) or "B" (precoded)
    script: str  # gripper | press | roller | knife
    parts: List[ToolPart]
    params: List[ParamSpec]
    points_per_part: int = 40
    depth_offset: float = 0.0
    has_dynamics: bool = True
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def param_names(self) -> List[str]:
        return [p.name for p in self.params]

    @property
    def lows(self) -> np.ndarray:
        return np.array([p.low for p in self.params])

    @property
    def highs(self) -> np.ndarray:
        return np.array([p.high for p in self.params])


@dataclass
class Action:
    """Tool id plus a parameter vector in that tool's action space."""
    tool: str
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)

    def as_dict(self, spec: ToolSpec) -> Dict[str, float]:
        return {name: float(v) for name, v in zip(spec.param_names, self.params)}


@dataclass
class DoughState:
    """Ground-truth dough of the simulated world."""
    positions: np.ndarray  # (n, 3)
    velocities: np.ndarray  # (n, 3)
    rest_pairs: np.ndarray  # (m, 2) particle index pairs
    rest_lengths: np.ndarray  # (m,)
    particle_volume: float
    particle_diameter: float

    @property
    def volume(self) -> float:
        return self.particle_volume * len(self.positions)

    def copy(self) -> "DoughState":
        return DoughState(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            rest_pairs=self.rest_pairs.copy(),
            rest_lengths=self.rest_lengths.copy(),
            particle_volume=self.particle_volume,
            particle_diameter=self.particle_diameter,
        )

    def cloud(self) -> PointCloud:
        return PointCloud(self.positions.copy(), groups=np.full(len(self.positions), DOUGH))


@dataclass
class ActionSequence:
    """One executed action and its subsampled observation frames."""
    action: Action
    frames: List[PointCloud]  # dough followed by tool particles

    @property
    def before(self) -> PointCloud:
        return self.frames[0].dough()

    @property
    def after(self) -> PointCloud:
        return self.frames[-1].dough()


@dataclass
class Episode:
    """Sequences applied to one dough between resets."""
    tool: str
    sequences: List[ActionSequence] = field(default_factory=list)

    def states(self) -> List[PointCloud]:
        """Dough states s_0..s_m at sequence boundaries."""
        if not self.sequences:
            return []
        return [self.sequences[0].before] + [seq.after for seq in self.sequences]


@dataclass
class BinSpec:
    """Overlapping bin layout for one action parameter."""
    low: float
    high: float
    n: int

    @property
    def count(self) -> int:
        return self.n + 1

    @property
    def spacing(self) -> float:
        return (self.high - self.low) / self.n

    @property
    def width(self) -> float:
        return 2.0 * (self.high - self.low) / self.n

    @property
    def centers(self) -> np.ndarray:
        return self.low + np.arange(self.n + 1) * self.spacing


@dataclass
class PairSample:
    """A (before, after) dough pair labelled with the tool that links them."""
    before: PointCloud
    after: PointCloud
    label: str


@dataclass
class PolicySample:
    """Synthetic (current, result, action) triple for policy training."""
    current: np.ndarray  # (n, 3)
    result: np.ndarray  # (n, 3)
    params: np.ndarray  # (n_params,)


@dataclass
class SceneGraph:
    """Dough + tool particle graph fed to the dynamics network."""
    n_dough: int
    n_tool: int
    receivers: np.ndarray  # (E,)
    senders: np.ndarray  # (E,)
    edge_kind: np.ndarray  # (E,) 0 dough-dough, 1 tool-dough
    node_features: Optional[np.ndarray] = None
    edge_features: Optional[np.ndarray] = None

    @property
    def n_nodes(self) -> int:
        return self.n_dough + self.n_tool

    @property
    def n_edges(self) -> int:
        return len(self.receivers)


@dataclass
class Checkpoint:
    """Serialized network: JSON header plus flat float32 weights."""
    header: Dict[str, Any]
    params: List[np.ndarray]
    optimizer: Optional[Dict[str, Any]] = None  # {"step", "epoch", "m", "v"}

    @property
    def architecture(self) -> str:
        return self.header["architecture"]

    @property
    def meta(self) -> Dict[str, Any]:
        return self.header.get("meta", {})


@dataclass
class TrainResult:
    """A trained checkpoint with its per-epoch curve."""
    checkpoint: Checkpoint
    curve: List[Dict[str, float]]
    final_loss: float
    metrics: Dict[str, float] = field(default_factory=dict)


@dataclass
class SubgoalStage:
    """Intermediate target reached with one tool."""
    tool: Optional[str]
    target: PointCloud
    epsilon: Optional[float] = None


@dataclass
class SubgoalPlan:
    """Ordered subgoals; the last stage's target is the final target."""
    stages: List[SubgoalStage]

    @property
    def final_target(self) -> PointCloud:
        return self.stages[-1].target


class TraceStatus(Enum):
    COMPLETE = "COMPLETE"
    INCOMPLETE = "INCOMPLETE"


@dataclass
class TraceRecord:
    """One executed action of the closed loop."""
    timestamp: float
    stage: int
    tool: str
    params: Dict[str, float]
    pre_loss: float
    post_loss: float
    predicted_loss: float
    wall_time: float
    candidates: Dict[str, float] = field(default_factory=dict)


@dataclass
class ExecutionTrace:
    """Closed-loop run result."""
    status: TraceStatus
    records: List[TraceRecord] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    final_cloud: Optional[PointCloud] = None
    perturbations: List[int] = field(default_factory=list)


@dataclass
class CommandResult:
    """Result of one orchestrated command."""
    exit_code: int
    outputs: Dict[str, str] = field(default_factory=dict)
    statistics: Dict[str, Any] = field(default_factory=dict)
