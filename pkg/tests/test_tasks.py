import tempfile
import unittest
from pathlib import Path

import numpy as np

from cooklab.errors import DataError, UsageError
from cooklab.simulator import Simulator, make_dough
from cooklab.tasks import TASK_FILE, TASKS, build_task, load_task, perturb, save_task

from tests import helpers


class TestBuildTask(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sim = Simulator(helpers.registry(), helpers.TINY_SIM)
        cls.task = build_task("cut", cls.sim, seed=1, n_points=30, epsilon=0.2)

    def test_builtin_names(self):
        self.assertEqual(sorted(TASKS), ["cut", "letter_L", "press_grip"])
        with self.assertRaises(UsageError):
            build_task("pizza", self.sim)

    def test_cut_task_has_one_knife_stage(self):
        stages = self.task.plan.stages
        self.assertEqual([s.tool for s in stages], ["knife"])
        self.assertEqual(len(stages[0].target), 30)
        self.assertEqual(stages[0].epsilon, 0.2)
        xs = np.sort(stages[0].target.positions[:, 0])
        self.assertGreater(np.diff(xs).max(), 0.005)

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_task(Path(tmp) / "cut", self.task, {"config_hash": "abc"})
            self.assertEqual(path.name, TASK_FILE)
            self.assertTrue((path.parent / "target.ply").exists())
            loaded = load_task(path.parent)
            with self.assertRaises(UsageError):
                save_task(Path(tmp) / "cut", self.task)
        self.assertEqual(loaded.name, "cut")
        self.assertEqual(loaded.seed, 1)
        self.assertEqual(loaded.plan.stages[0].epsilon, 0.2)
        np.testing.assert_allclose(loaded.plan.final_target.positions, self.task.plan.final_target.positions)
        np.testing.assert_allclose(loaded.scripted[0][0].params, self.task.scripted[0][0].params)
        np.testing.assert_array_equal(loaded.initial_state(self.sim).positions, self.task.initial_state(self.sim).positions)

    def test_missing_task(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DataError):
                load_task(tmp)


class TestPerturb(unittest.TestCase):

    def setUp(self):
        self.state = make_dough("block", 150, seed=0)

    def test_squash_keeps_footprint_times_height(self):
        out = perturb("squash", 0.36)(self.state)
        self.assertAlmostEqual(out.positions[:, 2].max(), 0.64 * self.state.positions[:, 2].max())
        area = np.ptp(out.positions[:, 0]) * np.ptp(out.positions[:, 1]) * np.ptp(out.positions[:, 2])
        before = np.ptp(self.state.positions[:, 0]) * np.ptp(self.state.positions[:, 1]) * np.ptp(self.state.positions[:, 2])
        self.assertAlmostEqual(area, before, places=12)
        np.testing.assert_allclose(out.rest_lengths, np.linalg.norm(
            out.positions[out.rest_pairs[:, 1]] - out.positions[out.rest_pairs[:, 0]], axis=1))

    def test_bulge_only_raises(self):
        out = perturb("bulge", 0.3, seed=2)(self.state)
        self.assertTrue(np.all(out.positions[:, 2] >= self.state.positions[:, 2]))
        np.testing.assert_array_equal(out.positions[:, :2], self.state.positions[:, :2])

    def test_bad_arguments(self):
        for kind, magnitude in (("squash", 0.0), ("squash", 1.0), ("twist", 0.3)):
            with self.assertRaises(UsageError):
                perturb(kind, magnitude)


if __name__ == "__main__":
    unittest.main()
