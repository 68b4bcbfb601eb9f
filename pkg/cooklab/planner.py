"""Closed-loop planning: tool arbitration, action synthesis and execution.

Action synthesis per tool:

- ``policy_plan``: one forward pass of the tool's multi-bin policy
- ``cem_plan``: cross-entropy method over dynamics rollouts
- ``gd_plan``: projected gradient descent through the differentiable rollout
- ``random_plan``: uniform random shooting with the CEM evaluation budget
- ``knife_plan``: geometric cut placement for the precoded knife
"""

import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.decomposition import PCA

from . import autodiff as ad
from .config import PlanConfig, SimConfig
from .dynamics import DynModel, rollout, rollout_tensor
from .errors import ActionError, GeometryError, GradientError, UsageError
from .metrics import combined_loss, point_cloud_loss
from .models import (
    Action,
    DoughState,
    ExecutionTrace,
    LossWeights,
    ParamKind,
    PointCloud,
    SubgoalPlan,
    ToolSpec,
    TraceRecord,
    TraceStatus,
)
from .policy import PolicyModel, infer_action
from .simulator import SimWorld, cut_position_for_volume, knife_split
from .toolselect import ToolClassifier, predict_topk

logger = logging.getLogger(__name__)

BACKTRACK_HALVINGS = 5
RESTART_ATTEMPTS = 3


@dataclass
class ToolModels:
    """Everything the planner knows about one tool."""
    spec: ToolSpec
    local_points: List[np.ndarray]
    dynamics: Optional[DynModel] = None
    policy: Optional[PolicyModel] = None


@dataclass
class PlanResult:
    """A synthesized action with its predicted outcome."""
    action: Action
    predicted: PointCloud
    predicted_loss: float
    evaluations: int = 0
    wall_time: float = 0.0
    history: List[float] = field(default_factory=list)


def _steps(model: DynModel, cfg: PlanConfig) -> int:
    return min(cfg.rollout_steps, model.steps_per_action)


def predict_outcome(tm: ToolModels, current: PointCloud, params: np.ndarray, cfg: PlanConfig) -> PointCloud:
    """Dough after one action, as the tool's dynamics model predicts it."""
    action = Action(tm.spec.id, params)
    return rollout(tm.dynamics, current, tm.spec, tm.local_points, [action], _steps(tm.dynamics, cfg))[-1]


def _scorer(tm: ToolModels, current: PointCloud, subgoal: PointCloud, cfg: PlanConfig, w: LossWeights) -> Callable[[np.ndarray], float]:
    def score(params: np.ndarray) -> float:
        try:
            predicted = predict_outcome(tm, current, params, cfg)
        except GeometryError as e:
            if e.code != "NON_FINITE":
                raise
            return np.inf
        return combined_loss(predicted, subgoal, w)
    return score


def _outcome(tm: ToolModels, current: PointCloud, params: np.ndarray, cfg: PlanConfig, loss: float) -> PointCloud:
    # no finite prediction exists; the dough is reported unchanged
    if not np.isfinite(loss):
        return current
    return predict_outcome(tm, current, params, cfg)


def _evaluate(objective: Callable[[np.ndarray], float], candidates: np.ndarray, threads: int) -> np.ndarray:
    """Objective of every row, in row order."""
    if threads <= 1:
        return np.array([objective(c) for c in candidates])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(objective, candidates)))


def cem_optimize(
    objective: Callable[[np.ndarray], float],
    lows: np.ndarray,
    highs: np.ndarray,
    cfg: PlanConfig,
    seed: int = 0,
    init: Optional[np.ndarray] = None,
    threads: int = 1,
) -> Tuple[np.ndarray, float, int]:
    """Minimize objective over a box with the cross-entropy method.

    Sampling happens in coordinates normalized to [0, 1]; the Gaussian is
    refit to the elites of every population and samples are clipped to the
    box. With zero iterations the best of the initial population is returned.
    NaN losses count as infinite; if no sample scores finite the initial
    mean is returned with an infinite loss.

    Args:
        objective: Maps a parameter vector to a loss
        lows: Lower bounds
        highs: Upper bounds
        cfg: Population, elites, iterations and initial std (range fraction)
        seed: Sampling seed
        init: Optional initial mean; it is also evaluated as a candidate
        threads: Parallel objective evaluations

    Returns:
        (best parameters ever seen, their loss, number of evaluations)
    """
    lows, highs = np.asarray(lows, dtype=np.float64), np.asarray(highs, dtype=np.float64)
    span = highs - lows
    mean = np.full(len(lows), 0.5) if init is None else (np.asarray(init) - lows) / span
    std = np.full(len(lows), cfg.init_std)
    start = np.clip(mean, 0.0, 1.0)
    best_u, best_loss, evaluations = None, np.inf, 0

    for it in range(cfg.cem_iterations + 1):
        rng = np.random.default_rng([seed, it])
        u = np.clip(rng.normal(mean, std, size=(cfg.population, len(lows))), 0.0, 1.0)
        if it == 0 and init is not None:
            u[0] = start
        losses = _evaluate(objective, lows + u * span, threads)
        losses = np.where(np.isnan(losses), np.inf, losses)
        evaluations += len(u)
        k = int(np.argmin(losses))
        if losses[k] < best_loss:
            best_u, best_loss = u[k].copy(), float(losses[k])
        elites = u[np.argsort(losses, kind="stable")[:cfg.elites]]
        mean, std = elites.mean(axis=0), elites.std(axis=0)
        logger.debug("CEM iteration %d: best %.6f", it, best_loss)
    if best_u is None:
        logger.warning("CEM found no finite loss in %d evaluations; keeping the initial mean", evaluations)
        best_u = start
    return lows + best_u * span, best_loss, evaluations


def center_heuristic(current: PointCloud, spec: ToolSpec) -> Action:
    """Action centered on the dough.

    Position parameters go to the dough centroid (zero offset for grippers),
    z to the top surface height minus the tool's depth offset, and theta to
    the principal axis of the top view. Other parameters take mid-range.

    Raises:
        ActionError: For the knife, whose cut is placed by volume instead
    """
    if spec.script == "knife":
        raise ActionError("the knife is placed by volume, not by the center heuristic")
    pts = current.positions
    centroid = pts.mean(axis=0)
    axis = PCA(n_components=2).fit(pts[:, :2]).components_[0]
    major = float(np.arctan2(axis[1], axis[0]))

    values = {}
    for p in spec.params:
        if p.name in ("x", "y"):
            values[p.name] = centroid[0 if p.name == "x" else 1]
        elif p.name == "r":
            values[p.name] = 0.0
        elif p.name == "z":
            values[p.name] = float(pts[:, 2].max()) - spec.depth_offset
        elif p.kind == ParamKind.ROTATION:
            period = p.high - p.low if p.high - p.low < 2 * np.pi - 1e-9 else 2 * np.pi
            values[p.name] = p.low + (major - p.low) % period
        else:
            values[p.name] = 0.5 * (p.low + p.high)
    params = np.array([values[p.name] for p in spec.params])
    return Action(spec.id, np.clip(params, spec.lows, spec.highs))


def _timed(fn):
    start = time.perf_counter()
    result = fn()
    result.wall_time = time.perf_counter() - start
    return result


def policy_plan(tm: ToolModels, current: PointCloud, subgoal: PointCloud, cfg: PlanConfig, w: Optional[LossWeights] = None) -> PlanResult:
    """Policy forward pass; the outcome is predicted for arbitration."""
    def run():
        action = infer_action(tm.policy, current, subgoal)
        predicted = predict_outcome(tm, current, action.params, cfg)
        return PlanResult(action, predicted, combined_loss(predicted, subgoal, w), evaluations=1)
    return _timed(run)


def cem_plan(
    tm: ToolModels,
    current: PointCloud,
    subgoal: PointCloud,
    cfg: PlanConfig,
    seed: int = 0,
    threads: int = 1,
    w: Optional[LossWeights] = None,
) -> PlanResult:
    """CEM over dynamics rollouts, seeded at the center heuristic."""
    def run():
        init = center_heuristic(current, tm.spec).params
        objective = _scorer(tm, current, subgoal, cfg, w)
        params, loss, n = cem_optimize(objective, tm.spec.lows, tm.spec.highs, cfg, seed, init, threads)
        return PlanResult(Action(tm.spec.id, params), _outcome(tm, current, params, cfg, loss), loss, evaluations=n)
    return _timed(run)


def random_plan(
    tm: ToolModels,
    current: PointCloud,
    subgoal: PointCloud,
    cfg: PlanConfig,
    seed: int = 0,
    threads: int = 1,
    w: Optional[LossWeights] = None,
) -> PlanResult:
    """Best of uniformly drawn actions; the budget defaults to CEM's."""
    def run():
        budget = cfg.random_samples or cfg.population * (cfg.cem_iterations + 1)
        rng = np.random.default_rng([seed, 7])
        candidates = rng.uniform(tm.spec.lows, tm.spec.highs, size=(budget, len(tm.spec.params)))
        losses = _evaluate(_scorer(tm, current, subgoal, cfg, w), candidates, threads)
        losses = np.where(np.isnan(losses), np.inf, losses)
        k = int(np.argmin(losses))
        params = candidates[k]
        loss = float(losses[k])
        return PlanResult(Action(tm.spec.id, params), _outcome(tm, current, params, cfg, loss), loss, evaluations=budget)
    return _timed(run)


def gd_loss(tm: ToolModels, current: PointCloud, subgoal: PointCloud, u: ad.Tensor, cfg: PlanConfig, w: Optional[LossWeights] = None) -> ad.Tensor:
    """Combined loss of the rollout for normalized parameters u in [0, 1]."""
    spec = tm.spec
    params = u * (spec.highs - spec.lows) + spec.lows
    try:
        final = rollout_tensor(tm.dynamics, current.positions, spec, tm.local_points, params, _steps(tm.dynamics, cfg))
    except GeometryError as e:
        if e.code != "NON_FINITE":
            raise
        raise GradientError("non-finite rollout in planning", code="NON_FINITE") from e
    return point_cloud_loss(final, subgoal.positions, w)


def _descend(tm, current, subgoal, u, cfg, w) -> Tuple[np.ndarray, float, List[float]]:
    """Projected gradient steps with backtracking from u; accepted losses never increase."""
    def value(v):
        return gd_loss(tm, current, subgoal, ad.Tensor(v), cfg, w).item()

    history = []
    for _ in range(cfg.gd_steps):
        param = ad.Tensor(u, requires_grad=True)
        with ad.Tape() as tape:
            loss = gd_loss(tm, current, subgoal, param, cfg, w)
        (grad,) = tape.backward(loss, [param])
        grad = grad.astype(np.float64)
        if not history:
            history.append(loss.item())
        if not np.all(np.isfinite(grad)) or not np.isfinite(loss.item()):
            raise GradientError("non-finite gradient in planning", code="NON_FINITE")
        scale = float(np.abs(grad).max())
        if scale == 0.0:
            break
        lr = cfg.gd_lr
        for _ in range(BACKTRACK_HALVINGS + 1):
            trial = np.clip(u - lr * grad / scale, 0.0, 1.0)
            trial_loss = value(trial)
            if trial_loss <= history[-1]:
                break
            lr *= 0.5
        else:
            break
        u = trial
        history.append(trial_loss)
    if not history:
        history.append(value(u))
    return u, history[-1], history


def gd_plan(
    tm: ToolModels,
    current: PointCloud,
    subgoal: PointCloud,
    cfg: PlanConfig,
    seed: int = 0,
    w: Optional[LossWeights] = None,
) -> PlanResult:
    """Gradient descent through the rollout with restarts; best restart wins.

    The first restart starts at the center heuristic, later ones at uniform
    random points. A restart hitting a non-finite gradient is retried from a
    fresh random start, at most RESTART_ATTEMPTS times, then skipped.

    Raises:
        GradientError: When every restart ends in a non-finite gradient
    """
    def run():
        spec = tm.spec
        span = spec.highs - spec.lows
        best_u, best_loss, history, evaluations = None, np.inf, [], 0
        for r in range(cfg.gd_restarts):
            for attempt in range(RESTART_ATTEMPTS):
                rng = np.random.default_rng([seed, r, attempt])
                if r == 0 and attempt == 0:
                    u0 = (center_heuristic(current, spec).params - spec.lows) / span
                else:
                    u0 = rng.uniform(0.0, 1.0, len(span))
                try:
                    u, loss, hist = _descend(tm, current, subgoal, u0, cfg, w)
                except GradientError:
                    evaluations += 1
                    logger.warning("Non-finite gradient in restart %d (attempt %d)", r, attempt + 1)
                    continue
                evaluations += len(hist)
                if loss < best_loss:
                    best_u, best_loss, history = u, loss, hist
                break
        if best_u is None:
            raise GradientError(f"every gradient restart of {spec.id} was non-finite", code="NON_FINITE")
        params = spec.lows + best_u * span
        predicted = predict_outcome(tm, current, params, cfg)
        return PlanResult(Action(spec.id, params), predicted, combined_loss(predicted, subgoal, w), evaluations, history=history)
    return _timed(run)


def cut_fraction(subgoal: PointCloud, min_gap: float) -> Optional[float]:
    """Share of subgoal points left of its widest x gap, if that gap is a cut."""
    xs = np.sort(subgoal.positions[:, 0])
    if len(xs) < 2:
        return None
    gaps = np.diff(xs)
    i = int(np.argmax(gaps))
    if gaps[i] < min_gap:
        return None
    return (i + 1) / len(xs)


def _state_of(cloud: PointCloud) -> DoughState:
    n = len(cloud)
    return DoughState(
        positions=cloud.positions.copy(),
        velocities=np.zeros((n, 3)),
        rest_pairs=np.zeros((0, 2), dtype=np.int64),
        rest_lengths=np.zeros(0),
        particle_volume=1.0 / n,
        particle_diameter=0.0,
    )


def knife_plan(tm: ToolModels, current: PointCloud, subgoal: PointCloud, sim_cfg: SimConfig, w: Optional[LossWeights] = None) -> Optional[PlanResult]:
    """Cut at the x leaving the subgoal's volume share on the low-x side.

    Returns None when the subgoal shows no cut. The outcome is predicted
    geometrically by splitting the observed cloud.
    """
    def run():
        fraction = cut_fraction(subgoal, 0.5 * sim_cfg.knife_offset)
        if fraction is None:
            return None
        state = _state_of(current)
        x = cut_position_for_volume(state, fraction * state.volume)
        y = current.centroid[1]
        params = np.clip(np.array([x, y]), tm.spec.lows, tm.spec.highs)
        predicted = PointCloud(knife_split(state, float(params[0]), sim_cfg.knife_offset).positions)
        return PlanResult(Action(tm.spec.id, params), predicted, combined_loss(predicted, subgoal, w), evaluations=1)

    start = time.perf_counter()
    result = run()
    if result is not None:
        result.wall_time = time.perf_counter() - start
    return result


class Planner:
    """Arbitrates tools and synthesizes actions against one set of models.

    Args:
        tools: Models per tool id, in registry order
        classifier: Optional tool classifier; all tools are candidates without it
        cfg: Planning settings
        sim_cfg: Simulator settings (knife offset, observation normals)
        weights: Loss weights used for every score
        threads: Worker threads for population evaluation
        seed: Base seed of every plan

    Raises:
        UsageError: PLANNER_MISMATCH when a tool lacks the model the planner needs
    """

    def __init__(
        self,
        tools: Dict[str, ToolModels],
        classifier: Optional[ToolClassifier] = None,
        cfg: Optional[PlanConfig] = None,
        sim_cfg: Optional[SimConfig] = None,
        weights: Optional[LossWeights] = None,
        threads: int = 1,
        seed: int = 0,
    ):
        self.tools = tools
        self.classifier = classifier
        self.cfg = cfg or PlanConfig()
        self.sim_cfg = sim_cfg or SimConfig()
        self.weights = weights or LossWeights()
        self.threads = threads
        self.seed = seed
        self.order = list(tools)
        self._check_models()

    def _check_models(self):
        for tool_id, tm in self.tools.items():
            if tm.spec.script == "knife":
                continue
            if tm.dynamics is None:
                raise UsageError(f"tool '{tool_id}' has no dynamics model", code="PLANNER_MISMATCH")
            if self.cfg.planner == "policy" and tm.policy is None:
                raise UsageError(f"planner 'policy' needs a policy for '{tool_id}'", code="PLANNER_MISMATCH")

    def plan_action(self, tool_id: str, current: PointCloud, subgoal: PointCloud, seed: Optional[int] = None) -> Optional[PlanResult]:
        """Best action of one tool toward subgoal with the configured planner."""
        tm = self.tools[tool_id]
        seed = self.seed if seed is None else seed
        if tm.spec.script == "knife":
            return knife_plan(tm, current, subgoal, self.sim_cfg, self.weights)
        planner = self.cfg.planner
        if planner == "policy":
            return policy_plan(tm, current, subgoal, self.cfg, self.weights)
        if planner == "cem":
            return cem_plan(tm, current, subgoal, self.cfg, seed, self.threads, self.weights)
        if planner == "gd":
            return gd_plan(tm, current, subgoal, self.cfg, seed, self.weights)
        return random_plan(tm, current, subgoal, self.cfg, seed, self.threads, self.weights)

    def candidates(self, current: PointCloud, subgoal: PointCloud, exclude: Sequence[str] = ()) -> List[str]:
        """Classifier top-k (or every tool) minus excluded tools."""
        if self.classifier is not None:
            ranked = [t for t, _ in predict_topk(self.classifier, current, subgoal, len(self.classifier.labels))]
            ranked = [t for t in ranked if t in self.tools and t not in exclude]
            return ranked[:self.cfg.top_k]
        return [t for t in self.order if t not in exclude]

    def select_tool(
        self,
        current: PointCloud,
        subgoal: PointCloud,
        exclude: Sequence[str] = (),
        seed: Optional[int] = None,
    ) -> Tuple[Optional[str], Optional[PlanResult], Dict[str, float]]:
        """Plan every candidate and keep the one predicted closest to subgoal.

        Returns:
            (tool id, its plan, predicted loss per candidate); the tool is None
            when no candidate is predicted to improve on the current loss.
            Equal scores go to the earlier tool in registry order.
        """
        baseline = combined_loss(current, subgoal, self.weights)
        scores: Dict[str, float] = {}
        plans: Dict[str, PlanResult] = {}
        for tool_id in self.candidates(current, subgoal, exclude):
            result = self.plan_action(tool_id, current, subgoal, seed)
            if result is None:
                continue
            plans[tool_id] = result
            scores[tool_id] = result.predicted_loss
        if not scores:
            return None, None, scores
        best = min(scores, key=lambda t: (scores[t], self.order.index(t)))
        if scores[best] >= baseline:
            logger.info("No candidate improves on loss %.4f (best %s %.4f)", baseline, best, scores[best])
            return None, None, scores
        return best, plans[best], scores

    def closed_loop(
        self,
        world: SimWorld,
        plan: SubgoalPlan,
        n_points: int = 300,
        perturbations: Optional[Dict[int, Callable[[DoughState], DoughState]]] = None,
    ) -> ExecutionTrace:
        """Observe, check the stage subgoal, select and execute; repeat.

        A stage is satisfied when the combined loss to its subgoal drops
        below its epsilon (or the configured one). Every tool may act at most
        ``max_actions_per_tool`` times. ``perturbations`` maps an action count
        to a deformation applied to the world right after that many actions;
        key 0 deforms the dough before the first action.

        Returns:
            ExecutionTrace, INCOMPLETE if the run stopped before the last stage
        """
        perturbations = perturbations or {}
        used: Counter = Counter()
        trace = ExecutionTrace(status=TraceStatus.INCOMPLETE)
        observe_count = 0

        def observe() -> PointCloud:
            nonlocal observe_count
            observe_count += 1
            return world.observe(n_points, seed=self.seed + observe_count)

        def perturbed(count: int) -> bool:
            hook = perturbations.get(count)
            if hook is None:
                return False
            world.perturb(hook)
            trace.perturbations.append(count)
            logger.info("Perturbed the dough after action %d", count)
            return True

        obs = observe()
        trace.initial_loss = combined_loss(obs, plan.final_target, self.weights)
        if perturbed(0):
            obs = observe()
        stage = 0
        while stage < len(plan.stages):
            target = plan.stages[stage].target
            epsilon = plan.stages[stage].epsilon
            epsilon = self.cfg.epsilon if epsilon is None else epsilon
            pre = combined_loss(obs, target, self.weights)
            if pre < epsilon:
                logger.info("Stage %d satisfied (loss %.4f < %.4f)", stage, pre, epsilon)
                stage += 1
                continue

            exhausted = [t for t, n in used.items() if n >= self.cfg.max_actions_per_tool]
            start = time.perf_counter()
            tool_id, result, scores = self.select_tool(obs, target, exhausted, seed=self.seed + len(trace.records))
            if tool_id is None:
                logger.warning("Stage %d: no tool improves the loss; stopping", stage)
                break

            world.apply(result.action)
            used[tool_id] += 1
            obs = observe()
            post = combined_loss(obs, target, self.weights)
            trace.records.append(TraceRecord(
                timestamp=time.time(),
                stage=stage,
                tool=tool_id,
                params=result.action.as_dict(self.tools[tool_id].spec),
                pre_loss=pre,
                post_loss=post,
                predicted_loss=result.predicted_loss,
                wall_time=time.perf_counter() - start,
                candidates=scores,
            ))
            logger.info("Stage %d: %s  loss %.4f -> %.4f (predicted %.4f)", stage, tool_id, pre, post, result.predicted_loss)

            if perturbed(len(trace.records)):
                obs = observe()

        if stage >= len(plan.stages):
            trace.status = TraceStatus.COMPLETE
        trace.final_cloud = obs
        trace.final_loss = combined_loss(obs, plan.final_target, self.weights)
        return trace


def trace_records(trace: ExecutionTrace) -> List[Dict]:
    return [asdict(r) for r in trace.records]


def write_trace(path: Union[str, Path], trace: ExecutionTrace, info: Optional[Dict] = None) -> str:
    """JSON lines: one record per action, then a summary line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in trace_records(trace):
            f.write(json.dumps(record, sort_keys=True) + "\n")
        summary = {
            "summary": True,
            "status": trace.status.value,
            "actions": len(trace.records),
            "initial_loss": trace.initial_loss,
            "final_loss": trace.final_loss,
            "perturbations": trace.perturbations,
        }
        summary.update(info or {})
        f.write(json.dumps(summary, sort_keys=True) + "\n")
    return str(path)


def read_trace(path: Union[str, Path]) -> Tuple[List[Dict], Dict]:
    """(action records, summary) of a trace file."""
    records, summary = [], {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("summary"):
                summary = row
            else:
                records.append(row)
    return records, summary
