import tempfile
import unittest
from pathlib import Path

import numpy as np

from cooklab.config import PlanConfig, PolicyConfig, SimConfig
from cooklab.dynamics import DynModel
from cooklab.errors import ActionError, GradientError, UsageError
from cooklab.graph import default_radius
from cooklab.metrics import combined_loss
from cooklab.models import Action, ExecutionTrace, PointCloud, SubgoalPlan, SubgoalStage, TraceRecord, TraceStatus
from cooklab.planner import (
    Planner,
    ToolModels,
    center_heuristic,
    cem_optimize,
    cem_plan,
    cut_fraction,
    gd_plan,
    knife_plan,
    policy_plan,
    random_plan,
    read_trace,
    write_trace,
)
from cooklab.policy import PolicyModel
from cooklab.simulator import SimWorld, Simulator, knife_split, make_dough
from cooklab.tasks import perturb

from tests import helpers

SMALL_PLAN = PlanConfig(planner="cem", rollout_steps=1, population=4, elites=2, cem_iterations=1, gd_steps=3, gd_restarts=2)


def float32_cloud(cloud: PointCloud) -> PointCloud:
    return PointCloud(cloud.positions.astype(np.float32).astype(np.float64))


def untrained(tool: str, dough: PointCloud) -> ToolModels:
    registry = helpers.registry()
    model = DynModel(hidden=8, blocks=1, radius=default_radius(dough.positions))
    return ToolModels(registry.load(tool), registry.tool_points(tool), dynamics=model)


class TestCem(unittest.TestCase):

    def setUp(self):
        self.target = np.array([0.3, -0.2, 0.7])
        self.objective = lambda p: float(np.sum((p - self.target) ** 2))
        self.lows, self.highs = -np.ones(3), np.ones(3)

    def test_converges_on_quadratic(self):
        cfg = PlanConfig(population=32, elites=6, cem_iterations=20)
        best, loss, n = cem_optimize(self.objective, self.lows, self.highs, cfg, seed=0)
        np.testing.assert_allclose(best, self.target, atol=1e-2)
        self.assertLess(loss, 3e-4)
        self.assertEqual(n, 32 * 21)

    def test_zero_iterations_returns_best_initial_sample(self):
        cfg = PlanConfig(population=8, elites=2, cem_iterations=0)
        seen = []

        def objective(p):
            seen.append(p.copy())
            return self.objective(p)

        best, loss, n = cem_optimize(objective, self.lows, self.highs, cfg, seed=1)
        self.assertEqual(n, 8)
        self.assertAlmostEqual(loss, min(self.objective(p) for p in seen))
        self.assertAlmostEqual(self.objective(best), loss)

    def test_deterministic_and_thread_independent(self):
        cfg = PlanConfig(population=8, elites=2, cem_iterations=3)
        a = cem_optimize(self.objective, self.lows, self.highs, cfg, seed=5)
        b = cem_optimize(self.objective, self.lows, self.highs, cfg, seed=5, threads=3)
        np.testing.assert_array_equal(a[0], b[0])
        self.assertEqual(a[1], b[1])

    def test_initial_mean_is_a_candidate(self):
        cfg = PlanConfig(population=4, elites=2, cem_iterations=0)
        best, loss, _ = cem_optimize(self.objective, self.lows, self.highs, cfg, seed=0, init=self.target)
        np.testing.assert_allclose(best, self.target)
        self.assertAlmostEqual(loss, 0.0)

    def test_nan_losses_fall_back_to_initial_mean(self):
        cfg = PlanConfig(population=4, elites=2, cem_iterations=2)
        best, loss, n = cem_optimize(lambda p: float("nan"), self.lows, self.highs, cfg, seed=0, init=self.target)
        np.testing.assert_allclose(best, self.target)
        self.assertEqual(loss, np.inf)
        self.assertEqual(n, 4 * 3)

    def test_nan_losses_are_skipped(self):
        cfg = PlanConfig(population=16, elites=4, cem_iterations=3)
        objective = lambda p: float("nan") if p[0] < 0 else self.objective(p)
        best, loss, _ = cem_optimize(objective, self.lows, self.highs, cfg, seed=2)
        self.assertGreaterEqual(best[0], 0.0)
        self.assertTrue(np.isfinite(loss))


class TestCenterHeuristic(unittest.TestCase):

    def setUp(self):
        self.registry = helpers.registry()

    def test_press_goes_to_centroid_and_top(self):
        spec = self.registry.load("press_circle")
        cloud = PointCloud(make_dough("block", 200, seed=0).positions + [0.004, -0.003, 0.0])
        action = center_heuristic(cloud, spec)
        np.testing.assert_allclose(action.params[:2], cloud.centroid[:2])
        self.assertAlmostEqual(action.params[2], cloud.positions[:, 2].max() - 0.01)

    def test_gripper_aligns_with_major_axis(self):
        spec = self.registry.load("gripper_two_rod")
        cloud = helpers.blob(400, axes=(0.03, 0.01, 0.01), yaw=0.5)
        r, theta, d = center_heuristic(cloud, spec).params
        self.assertEqual(r, 0.0)
        self.assertLess(abs(theta - 0.5), np.deg2rad(5.0))
        self.assertAlmostEqual(d, 0.5 * (0.004 + 0.07))

    def test_knife_is_not_centred(self):
        with self.assertRaises(ActionError):
            center_heuristic(helpers.blob(50), self.registry.load("knife"))


class TestKnifePlan(unittest.TestCase):

    def setUp(self):
        registry = helpers.registry()
        self.tm = ToolModels(registry.load("knife"), registry.tool_points("knife"))
        self.state = make_dough("block", 200, seed=2)
        self.current = PointCloud(self.state.positions)

    def test_cut_fraction(self):
        subgoal = PointCloud(knife_split(self.state, -0.01, 0.01).positions)
        left = int(np.sum(self.state.positions[:, 0] <= -0.01))
        self.assertAlmostEqual(cut_fraction(subgoal, 0.005), left / 200)
        self.assertIsNone(cut_fraction(self.current, 0.005))

    def test_plan_reproduces_the_subgoal_split(self):
        subgoal = PointCloud(knife_split(self.state, -0.01, 0.01).positions)
        result = knife_plan(self.tm, self.current, subgoal, SimConfig())
        x = result.action.params[0]
        left = self.state.positions[:, 0] <= -0.01
        np.testing.assert_array_equal(self.state.positions[:, 0] <= x, left)
        self.assertAlmostEqual(result.predicted_loss, 0.0, places=12)

    def test_no_cut_in_subgoal(self):
        self.assertIsNone(knife_plan(self.tm, self.current, self.current, SimConfig()))


class TestPlans(unittest.TestCase):

    def setUp(self):
        self.current = float32_cloud(helpers.blob(40, seed=3))
        self.subgoal = float32_cloud(helpers.blob(40, axes=(0.028, 0.028, 0.006), seed=4))
        self.tm = untrained("press_circle", self.current)

    def test_non_finite_dynamics(self):
        head = self.tm.dynamics.nonrigid_head.layers[-1]
        head.weight.data = np.full(head.weight.shape, np.nan, dtype=head.weight.data.dtype)
        with self.assertRaises(GradientError) as ctx:
            gd_plan(self.tm, self.current, self.subgoal, SMALL_PLAN, seed=0)
        self.assertEqual(ctx.exception.code, "NON_FINITE")
        result = cem_plan(self.tm, self.current, self.subgoal, SMALL_PLAN, seed=0)
        np.testing.assert_allclose(result.action.params, center_heuristic(self.current, self.tm.spec).params)
        self.assertEqual(result.predicted_loss, np.inf)
        self.assertIs(result.predicted, self.current)
        tool, plan, scores = Planner({"press_circle": self.tm}, cfg=SMALL_PLAN).select_tool(self.current, self.subgoal)
        self.assertIsNone(tool)
        self.assertEqual(scores, {"press_circle": np.inf})

    def test_random_plan_uses_cem_budget(self):
        result = random_plan(self.tm, self.current, self.subgoal, SMALL_PLAN, seed=0)
        self.assertEqual(result.evaluations, 4 * 2)
        spec = self.tm.spec
        self.assertTrue(np.all((result.action.params >= spec.lows) & (result.action.params <= spec.highs)))
        self.assertGreaterEqual(result.wall_time, 0.0)

    def test_cem_with_flat_objective_keeps_center_heuristic(self):
        result = cem_plan(self.tm, self.current, self.subgoal, SMALL_PLAN, seed=0)
        np.testing.assert_allclose(result.action.params, center_heuristic(self.current, self.tm.spec).params)
        self.assertEqual(result.evaluations, 4 * 2)
        self.assertAlmostEqual(result.predicted_loss, combined_loss(result.predicted, self.subgoal))

    def test_policy_plan_is_one_forward_pass(self):
        cfg = PolicyConfig(encoder_widths=[8, 16], head_hidden=8, n_points=30)
        self.tm.policy = PolicyModel.for_tool(self.tm.spec, cfg)
        result = policy_plan(self.tm, self.current, self.subgoal, SMALL_PLAN)
        np.testing.assert_allclose(result.action.params, self.tm.spec.lows)
        self.assertEqual(result.evaluations, 1)
        self.assertEqual(len(result.predicted), len(self.current))

    def test_gd_without_gradient_keeps_center_heuristic(self):
        result = gd_plan(self.tm, self.current, self.subgoal, SMALL_PLAN, seed=0)
        np.testing.assert_allclose(result.action.params, center_heuristic(self.current, self.tm.spec).params)
        self.assertEqual(len(result.history), 1)


class TestPlanner(unittest.TestCase):

    def setUp(self):
        self.current = float32_cloud(helpers.blob(40, seed=3))
        self.subgoal = float32_cloud(helpers.blob(40, axes=(0.028, 0.028, 0.006), seed=4))

    def test_policy_planner_needs_policies(self):
        with self.assertRaises(UsageError) as ctx:
            Planner({"press_circle": untrained("press_circle", self.current)}, cfg=PlanConfig(planner="policy"))
        self.assertEqual(ctx.exception.code, "PLANNER_MISMATCH")

    def test_no_tool_selected_when_nothing_moves(self):
        tools = {t: untrained(t, self.current) for t in ("press_circle", "press_square")}
        planner = Planner(tools, cfg=SMALL_PLAN)
        tool, plan, scores = planner.select_tool(self.current, self.subgoal)
        self.assertIsNone(tool)
        self.assertIsNone(plan)
        self.assertEqual(sorted(scores), ["press_circle", "press_square"])

    def test_candidates_without_classifier(self):
        tools = {t: untrained(t, self.current) for t in ("press_circle", "press_square")}
        planner = Planner(tools, cfg=SMALL_PLAN)
        self.assertEqual(planner.candidates(self.current, self.subgoal, exclude=["press_circle"]), ["press_square"])


class TestClosedLoop(unittest.TestCase):

    def setUp(self):
        sim = Simulator(helpers.registry(), helpers.TINY_SIM)
        self.world = SimWorld(sim, make_dough("block", 40, seed=0, cfg=helpers.TINY_SIM))

    def test_satisfied_target_needs_no_action(self):
        target = self.world.observe(30, seed=9)
        plan = SubgoalPlan([SubgoalStage(None, target, epsilon=1e9)])
        trace = Planner({}, cfg=SMALL_PLAN).closed_loop(self.world, plan, n_points=30)
        self.assertEqual(trace.status, TraceStatus.COMPLETE)
        self.assertEqual(trace.records, [])
        self.assertIsNotNone(trace.final_cloud)

    def test_perturbation_before_first_action(self):
        height = self.world.state.positions[:, 2].max()
        target = self.world.observe(30, seed=9)
        plan = SubgoalPlan([SubgoalStage(None, target, epsilon=1e9)])
        trace = Planner({}, cfg=SMALL_PLAN).closed_loop(self.world, plan, n_points=30, perturbations={0: perturb("squash")})
        self.assertEqual(trace.perturbations, [0])
        self.assertEqual(trace.status, TraceStatus.COMPLETE)
        self.assertLess(self.world.state.positions[:, 2].max(), height)

    def test_knife_run_with_perturbation_after_the_cut(self):
        registry = helpers.registry()
        state = make_dough("block", 40, seed=0, cfg=helpers.TINY_SIM)
        x = float(state.positions[:, 0].mean())
        cut = SimWorld(self.world.simulator, state)
        cut.apply(Action("knife", np.array([x, 0.0])))
        plan = SubgoalPlan([SubgoalStage(None, cut.observe(30, seed=5), epsilon=0.0)])
        cfg = SMALL_PLAN.model_copy(update={"max_actions_per_tool": 1})
        planner = Planner({"knife": ToolModels(registry.load("knife"), registry.tool_points("knife"))}, cfg=cfg,
                          sim_cfg=helpers.TINY_SIM)
        trace = planner.closed_loop(self.world, plan, n_points=30, perturbations={1: perturb("bulge", seed=3)})
        self.assertEqual([r.tool for r in trace.records], ["knife"])
        self.assertLess(trace.records[0].post_loss, trace.records[0].pre_loss)
        self.assertEqual(trace.perturbations, [1])
        self.assertEqual(trace.status, TraceStatus.INCOMPLETE)

    def test_stops_incomplete_without_tools(self):
        target = helpers.blob(30, axes=(0.03, 0.03, 0.004))
        plan = SubgoalPlan([SubgoalStage(None, target, epsilon=0.0)])
        trace = Planner({}, cfg=SMALL_PLAN).closed_loop(self.world, plan, n_points=30)
        self.assertEqual(trace.status, TraceStatus.INCOMPLETE)
        self.assertEqual(trace.records, [])
        self.assertGreater(trace.final_loss, 0.0)


class TestTraceFile(unittest.TestCase):

    def test_write_and_read(self):
        record = TraceRecord(1.5, 0, "press_circle", {"x": 0.0, "y": 0.0, "z": 0.01}, 2.0, 1.0, 0.9, 0.01, {"press_circle": 0.9})
        trace = ExecutionTrace(TraceStatus.INCOMPLETE, [record], initial_loss=2.0, final_loss=1.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_trace(Path(tmp) / "run" / "trace.jsonl", trace, {"task": "cut"})
            records, summary = read_trace(path)
        self.assertEqual(len(records), 1)
        self.assertEqual(records[0]["params"], {"x": 0.0, "y": 0.0, "z": 0.01})
        self.assertEqual(summary["status"], "INCOMPLETE")
        self.assertEqual(summary["actions"], 1)
        self.assertEqual(summary["task"], "cut")


if __name__ == "__main__":
    unittest.main()
