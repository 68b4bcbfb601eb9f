"""Scripted expert pipelines that produce subgoal plans, plus perturbations.

A task runs a hand-coded tool sequence in the simulator from a fresh dough and
records the observed dough after each tool stage as that stage's subgoal.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .checkpoint import FORMAT_VERSION
from .dataset import prepare_output
from .errors import DataError, UsageError
from .geometry import perceive
from .models import Action, DoughState, SubgoalPlan, SubgoalStage
from .ply_io import read_ply, write_ply
from .simulator import Simulator, cut_position_for_volume, make_dough

logger = logging.getLogger(__name__)

TASK_FILE = "task.json"


@dataclass
class Task:
    """A subgoal plan and the world it starts from."""
    name: str
    initial_shape: str
    seed: int
    plan: SubgoalPlan
    scripted: List[List[Action]] = field(default_factory=list)

    def initial_state(self, simulator: Simulator) -> DoughState:
        cfg = simulator.cfg
        return make_dough(self.initial_shape, cfg.n_particles, self.seed, cfg)


def _jitter(rng: np.random.Generator, value: float, amount: float) -> float:
    return value + float(rng.uniform(-amount, amount))


def _press_grip_script(state: DoughState, rng: np.random.Generator) -> List[Tuple[str, List[np.ndarray]]]:
    press = [np.array([_jitter(rng, 0.0, 0.003), _jitter(rng, 0.0, 0.003), _jitter(rng, 0.016, 0.002)])]
    grip = [np.array([0.0, float(rng.uniform(0.0, np.pi)), _jitter(rng, 0.035, 0.004)])]
    return [("press_circle", press), ("gripper_two_rod", grip)]


def _letter_l_script(state: DoughState, rng: np.random.Generator) -> List[Tuple[str, List[np.ndarray]]]:
    # narrow the upper band in x, then the right band in y
    grips = [
        np.array([_jitter(rng, 0.014, 0.002), 0.0, _jitter(rng, 0.022, 0.002)]),
        np.array([_jitter(rng, -0.014, 0.002), 0.5 * np.pi, _jitter(rng, 0.022, 0.002)]),
    ]
    return [("gripper_two_rod", grips)]


def _cut_script(state: DoughState, rng: np.random.Generator) -> List[Tuple[str, List[np.ndarray]]]:
    fraction = float(rng.uniform(0.3, 0.45))
    x = cut_position_for_volume(state, fraction * state.volume)
    return [("knife", [np.array([x, 0.0])])]


TASKS: Dict[str, Tuple[str, Callable]] = {
    "press_grip": ("block", _press_grip_script),
    "letter_L": ("block", _letter_l_script),
    "cut": ("block", _cut_script),
}


def build_task(
    name: str,
    simulator: Simulator,
    seed: int = 0,
    n_points: int = 300,
    epsilon: Optional[float] = None,
) -> Task:
    """Run a built-in scripted pipeline and collect its subgoals.

    Args:
        name: One of TASKS
        simulator: Simulator executing the script
        seed: Seeds the initial dough, the script jitter and the observations
        n_points: Points per subgoal cloud
        epsilon: Per-stage satisfaction threshold stored with each stage

    Raises:
        UsageError: For an unknown task name
    """
    if name not in TASKS:
        raise UsageError(f"unknown task '{name}' (choose from {sorted(TASKS)})", code="USAGE")
    shape, script = TASKS[name]
    task = Task(name=name, initial_shape=shape, seed=seed, plan=SubgoalPlan(stages=[]))
    state = task.initial_state(simulator)
    rng = np.random.default_rng([seed, 11])

    for k, (tool, param_list) in enumerate(script(state, rng)):
        spec = simulator.registry.load(tool)
        actions = [Action(tool, np.clip(p, spec.lows, spec.highs)) for p in param_list]
        for action in actions:
            _, state = simulator.apply_action(state, action)
        target = perceive(state.cloud(), n_points, seed=seed + 100 + k, normal_k=simulator.cfg.normal_k)
        task.plan.stages.append(SubgoalStage(tool=tool, target=target, epsilon=epsilon))
        task.scripted.append(actions)
        logger.info("Task %s stage %d: %s x%d", name, k, tool, len(actions))
    return task


def save_task(out_dir: Union[str, Path], task: Task, info: Optional[Dict[str, Any]] = None, force: bool = False) -> Path:
    """Write task.json, one PLY per subgoal and target.ply (the final subgoal)."""
    out_dir = prepare_output(out_dir, force)
    out_dir.mkdir(parents=True)
    stages = []
    for k, stage in enumerate(task.plan.stages):
        ply = f"stage_{k:02d}.ply"
        write_ply(out_dir / ply, stage.target)
        stages.append({
            "tool": stage.tool,
            "ply": ply,
            "epsilon": stage.epsilon,
            "actions": [a.params.tolist() for a in task.scripted[k]] if k < len(task.scripted) else [],
        })
    write_ply(out_dir / "target.ply", task.plan.final_target)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": task.name,
        "initial_shape": task.initial_shape,
        "seed": task.seed,
        "stages": stages,
    }
    manifest.update(info or {})
    path = out_dir / TASK_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_task(path: Union[str, Path]) -> Task:
    """Read a task directory (or its task.json)."""
    path = Path(path)
    if path.is_dir():
        path = path / TASK_FILE
    if not path.exists():
        raise DataError(f"task file not found: {path}", code="NO_DATA")
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: format_version {data.get('format_version')} is not supported", code="FORMAT_VERSION")
    stages = [
        SubgoalStage(tool=s.get("tool"), target=read_ply(path.parent / s["ply"]), epsilon=s.get("epsilon"))
        for s in data["stages"]
    ]
    if not stages:
        raise DataError(f"{path}: task has no stages", code="NO_DATA")
    scripted = [[Action(s["tool"], p) for p in s.get("actions", [])] for s in data["stages"]]
    return Task(data["name"], data["initial_shape"], int(data["seed"]), SubgoalPlan(stages), scripted)


def _settle(state: DoughState, positions: np.ndarray) -> DoughState:
    """State at new positions whose rest lengths accept the deformation."""
    pairs = state.rest_pairs
    rest = np.linalg.norm(positions[pairs[:, 1]] - positions[pairs[:, 0]], axis=1)
    return DoughState(
        positions=positions,
        velocities=np.zeros_like(positions),
        rest_pairs=pairs.copy(),
        rest_lengths=rest,
        particle_volume=state.particle_volume,
        particle_diameter=state.particle_diameter,
    )


def perturb(kind: str = "squash", magnitude: float = 0.3, seed: int = 0) -> Callable[[DoughState], DoughState]:
    """External deformation of the world dough, for robustness runs.

    Kinds:
        squash: scale heights by (1 - magnitude), spreading x, y to keep volume
        bulge: lift a random patch of the top surface by magnitude x height

    Returns:
        A function DoughState -> DoughState for ``SimWorld.perturb``
    """
    if not 0.0 < magnitude < 1.0:
        raise UsageError(f"perturbation magnitude must lie in (0, 1), got {magnitude}", code="USAGE")

    def squash(state: DoughState) -> DoughState:
        pos = state.positions.copy()
        center = pos[:, :2].mean(axis=0)
        pos[:, 2] *= 1.0 - magnitude
        pos[:, :2] = center + (pos[:, :2] - center) / np.sqrt(1.0 - magnitude)
        return _settle(state, pos)

    def bulge(state: DoughState) -> DoughState:
        pos = state.positions.copy()
        rng = np.random.default_rng([seed, 13])
        anchor = pos[rng.integers(len(pos))]
        height = float(pos[:, 2].max())
        dist = np.linalg.norm(pos[:, :2] - anchor[:2], axis=1)
        reach = 0.25 * float(np.ptp(pos[:, 0]) + np.ptp(pos[:, 1]))
        pos[:, 2] += magnitude * height * np.clip(1.0 - dist / reach, 0.0, 1.0) * (pos[:, 2] / height)
        return _settle(state, pos)

    kinds = {"squash": squash, "bulge": bulge}
    if kind not in kinds:
        raise UsageError(f"unknown perturbation '{kind}' (choose from {sorted(kinds)})", code="USAGE")
    return kinds[kind]
