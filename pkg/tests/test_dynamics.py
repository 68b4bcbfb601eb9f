import tempfile
import unittest
from pathlib import Path

import numpy as np

from cooklab import autodiff as ad
from cooklab.checkpoint import load_checkpoint, write_checkpoint
from cooklab.config import DynamicsConfig
from cooklab.dynamics import (
    ARCHITECTURE,
    DynModel,
    load_dynamics,
    predict_step,
    rollout,
    rollout_tensor,
    static_loss,
    train_dynamics,
    training_windows,
    window_loss,
)
from cooklab.errors import DataError
from cooklab.graph import default_radius
from cooklab.models import Action, LossWeights, PointCloud

from tests import helpers

TINY = DynamicsConfig(hidden=8, blocks=1, epochs=2, windows_per_epoch=2, batch_size=2, holdout_fraction=0.5, holdout_windows=2)


def randomize_heads(model, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for head in (model.nonrigid_head, model.rigid_head):
        last = head.layers[-1]
        last.weight.data = (rng.normal(size=last.weight.shape) * scale).astype(last.weight.data.dtype)
        last.bias.data = (rng.normal(size=last.bias.shape) * scale).astype(last.bias.data.dtype)


class TestModel(unittest.TestCase):

    def setUp(self):
        self.registry = helpers.registry()
        self.spec = self.registry.load("press_circle")
        self.local = self.registry.tool_points("press_circle")
        self.dough = helpers.blob(60, seed=1)

    def test_temporal_grid(self):
        model = DynModel(stride=3, frames=16)
        self.assertEqual(model.steps_per_action, 5)
        self.assertAlmostEqual(model.step_progress, 0.6)

    def test_untrained_model_keeps_dough_in_place(self):
        model = DynModel(hidden=8, blocks=1, radius=default_radius(self.dough.positions))
        clouds = rollout(model, self.dough, self.spec, self.local, [Action("press_circle", [0.0, 0.0, 0.01])])
        self.assertEqual(len(clouds), 6)
        for cloud in clouds:
            np.testing.assert_allclose(cloud.positions, self.dough.positions, atol=1e-7)

    def test_rollout_length_is_capped(self):
        model = DynModel(hidden=8, blocks=1, radius=default_radius(self.dough.positions))
        actions = [Action("press_circle", [0.0, 0.0, 0.01])] * 3
        self.assertEqual(len(rollout(model, self.dough, self.spec, self.local, actions, n_steps=7)), 8)
        self.assertEqual(len(rollout(model, self.dough, self.spec, self.local, actions, n_steps=100)), 16)

    def test_translation_equivariance(self):
        with ad.precision(np.float64):
            model = DynModel(hidden=8, blocks=2, radius=default_radius(self.dough.positions), seed=3)
            randomize_heads(model)
            tool = self.local[0] + [0.0, 0.0, 0.026]
            shift = np.array([0.0078125, -0.00390625, 0.001953125])
            base = model.step(self.dough.positions, tool, tool - [0.0, 0.0, 0.002]).data
            moved = model.step(self.dough.positions + shift, tool + shift, tool + shift - [0.0, 0.0, 0.002]).data
        self.assertGreater(np.abs(base - self.dough.positions).max(), 1e-6)
        np.testing.assert_allclose(moved, base + shift, atol=1e-9)

    def test_predict_step_adds_normals(self):
        model = DynModel(hidden=8, blocks=1, radius=default_radius(self.dough.positions))
        out = predict_step(model, self.dough, self.local[0] + [0, 0, 0.05], self.local[0] + [0, 0, 0.04])
        self.assertIsNotNone(out.normals)
        self.assertEqual(len(out), 60)

    def test_rollout_tensor_has_parameter_gradients(self):
        with ad.precision(np.float64):
            model = DynModel(hidden=8, blocks=1, radius=default_radius(self.dough.positions), seed=1)
            randomize_heads(model, seed=2)
            params = ad.Tensor(np.array([0.0, 0.0, 0.012]), requires_grad=True)
            with ad.Tape() as tape:
                final = rollout_tensor(model, self.dough.positions, self.spec, self.local, params, 5)
                loss = ad.square(final).sum()
            (grad,) = tape.backward(loss, [params])
        self.assertEqual(final.shape, (60, 3))
        self.assertTrue(np.all(np.isfinite(grad)))


class TestTraining(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.episodes = list(helpers.episodes("press_circle", count=2))
        cls.sim_cfg = helpers.TINY_SIM

    def test_windows(self):
        windows = training_windows(self.episodes, 16, 2, 3)
        self.assertEqual(len(windows), 2 * 10)
        self.assertEqual(windows[0], (0, 0, 0))
        self.assertEqual(windows[-1], (1, 0, 9))

    def test_static_loss_of_still_frames(self):
        frames = self.episodes[0].sequences[0].frames
        model = DynModel(hidden=8, blocks=1, radius=default_radius(frames[0].dough().positions))
        w = LossWeights()
        with ad.precision(np.float64):
            loss = window_loss(model, self.episodes, (0, 0, 0), 2, w).item()
        # the differentiable EMD adds sqrt(1e-12) per matched pair
        self.assertAlmostEqual(loss, static_loss(self.episodes, (0, 0, 0), 2, 3, w), delta=1e-4)

    def test_window_loss_gradient_matches_finite_differences(self):
        frames = self.episodes[0].sequences[0].frames
        with ad.precision(np.float64):
            model = DynModel(hidden=8, blocks=1, radius=default_radius(frames[0].dough().positions), seed=5)
            randomize_heads(model, seed=6)
            checked = [model.nonrigid_head.layers[-1].weight, model.rigid_head.layers[-1].weight,
                       model.node_encoder.layers[0].weight]
            w = LossWeights()
            window = (0, 0, 3)
            with ad.Tape() as tape:
                loss = window_loss(model, self.episodes, window, 1, w)
            grads = tape.backward(loss, checked)
            h = 1e-6
            for tensor, grad in zip(checked, grads):
                for idx in [(0, 0), (1, 2), (3, 1)]:
                    saved = tensor.data[idx]
                    tensor.data[idx] = saved + h
                    plus = window_loss(model, self.episodes, window, 1, w).item()
                    tensor.data[idx] = saved - h
                    minus = window_loss(model, self.episodes, window, 1, w).item()
                    tensor.data[idx] = saved
                    np.testing.assert_allclose(grad[idx], (plus - minus) / (2 * h), rtol=1e-4, atol=1e-9)

    def test_training_curve_checkpoint_and_holdout(self):
        seen = []
        result = train_dynamics(self.episodes, TINY, sim_cfg=self.sim_cfg, seed=0, cfg_hash="abc",
                                on_epoch=lambda e, c: seen.append(e))
        self.assertEqual(seen, [0, 1])
        self.assertEqual([c["epoch"] for c in result.curve], [0, 1])
        self.assertTrue(np.isfinite(result.final_loss))
        self.assertIn("holdout_loss", result.metrics)
        self.assertIn("static_loss", result.metrics)
        self.assertEqual(result.checkpoint.architecture, ARCHITECTURE)
        self.assertEqual(result.checkpoint.meta["tool"], "press_circle")

    def test_checkpoint_reproduces_predictions(self):
        result = train_dynamics(self.episodes, TINY, sim_cfg=self.sim_cfg, seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "dyn.ckpt"
            write_checkpoint(path, result.checkpoint)
            a = load_dynamics(result.checkpoint)
            b = load_dynamics(str(path))
        frame = self.episodes[0].sequences[0].frames[0]
        tool = frame.tool().positions
        pa = a.step(frame.dough().positions, tool, tool - [0, 0, 0.002]).data
        pb = b.step(frame.dough().positions, tool, tool - [0, 0, 0.002]).data
        np.testing.assert_array_equal(pa, pb)

    def test_resume_matches_uninterrupted_run(self):
        full = train_dynamics(self.episodes, TINY, sim_cfg=self.sim_cfg, seed=2)
        first = train_dynamics(self.episodes, TINY.model_copy(update={"epochs": 1}), sim_cfg=self.sim_cfg, seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "dyn.ckpt"
            write_checkpoint(path, first.checkpoint)
            resumed = train_dynamics(self.episodes, TINY, sim_cfg=self.sim_cfg, seed=2, resume=load_checkpoint(path))
        self.assertEqual([c["epoch"] for c in resumed.curve], [0, 1])
        self.assertAlmostEqual(resumed.final_loss, full.final_loss, places=5)
        for p, q in zip(full.checkpoint.params, resumed.checkpoint.params):
            np.testing.assert_allclose(p, q, rtol=1e-5, atol=1e-7)

    def test_no_sequences(self):
        with self.assertRaises(DataError):
            train_dynamics([], TINY)

    def test_window_longer_than_action(self):
        with self.assertRaises(DataError):
            train_dynamics(self.episodes, TINY.model_copy(update={"s": 6}), sim_cfg=self.sim_cfg)

    def test_cloud_inputs_are_point_clouds(self):
        frame = self.episodes[0].sequences[0].frames[0]
        self.assertIsInstance(frame.dough(), PointCloud)
        self.assertEqual(len(frame.dough()), helpers.TINY_SIM.n_particles)


if __name__ == "__main__":
    unittest.main()
