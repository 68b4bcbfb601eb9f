import itertools
import unittest

import numpy as np

from cooklab import autodiff as ad
from cooklab.errors import GeometryError
from cooklab.metrics import (
    chamfer,
    chamfer_tensor,
    combined_loss,
    emd_exact,
    emd_tensor,
    metric_report,
    normal_chamfer,
    point_cloud_loss,
)
from cooklab.models import LossWeights, PointCloud


def brute_chamfer(a, b):
    d = np.sum((a[:, None] - b[None]) ** 2, axis=-1)
    return d.min(axis=1).sum() + d.min(axis=0).sum()


def brute_emd(a, b):
    best = np.inf
    for perm in itertools.permutations(range(len(b))):
        best = min(best, np.linalg.norm(a - b[list(perm)], axis=1).sum())
    return best


class TestChamfer(unittest.TestCase):

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for na, nb in ((10, 10), (7, 30), (40, 5)):
            a, b = rng.normal(size=(na, 3)), rng.normal(size=(nb, 3))
            self.assertAlmostEqual(chamfer(a, b), brute_chamfer(a, b), places=10)

    def test_symmetric_and_zero_on_self(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(25, 3)), rng.normal(size=(18, 3))
        self.assertEqual(chamfer(a, b), chamfer(b, a))
        self.assertEqual(chamfer(a, a), 0.0)

    def test_empty_cloud(self):
        with self.assertRaises(GeometryError) as ctx:
            chamfer(np.zeros((0, 3)), np.zeros((3, 3)))
        self.assertEqual(ctx.exception.code, "EMPTY_CLOUD")


class TestEmd(unittest.TestCase):

    def test_matches_permutation_search(self):
        rng = np.random.default_rng(2)
        for n in (1, 3, 6):
            a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
            result = emd_exact(a, b)
            self.assertAlmostEqual(result.cost, brute_emd(a, b), places=10)
            self.assertEqual(sorted(result.assignment.tolist()), list(range(n)))

    def test_permuted_copy_costs_nothing(self):
        a = np.random.default_rng(3).normal(size=(50, 3))
        perm = np.random.default_rng(4).permutation(50)
        result = emd_exact(a, a[perm])
        self.assertAlmostEqual(result.cost, 0.0)
        np.testing.assert_array_equal(a[perm][result.assignment], a)

    def test_translation_cost(self):
        a = np.random.default_rng(5).normal(size=(20, 3)) * 0.01
        self.assertAlmostEqual(emd_exact(a, a + [0.001, 0.0, 0.0]).cost, 20 * 0.001, places=9)

    def test_size_mismatch(self):
        with self.assertRaises(GeometryError) as ctx:
            emd_exact(np.zeros((3, 3)), np.zeros((4, 3)))
        self.assertEqual(ctx.exception.code, "SIZE_MISMATCH")


class TestCombined(unittest.TestCase):

    def test_weighted_sum(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        w = LossWeights(0.25, 0.75)
        expected = 0.25 * chamfer(a, b) + 0.75 * emd_exact(a, b).cost
        self.assertAlmostEqual(combined_loss(a, b, w), expected)

    def test_chamfer_only_accepts_unequal_sizes(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
        self.assertAlmostEqual(combined_loss(a, b, LossWeights(1.0, 0.0)), chamfer(a, b))

    def test_negative_weights_rejected(self):
        with self.assertRaises(ValueError):
            LossWeights(-0.1, 0.5)


class TestReport(unittest.TestCase):

    def test_keys_and_means(self):
        rng = np.random.default_rng(8)
        a = PointCloud(rng.normal(size=(10, 3)), normals=np.tile([0.0, 0.0, 1.0], (10, 1)))
        b = PointCloud(rng.normal(size=(10, 3)), normals=np.tile([0.0, 0.0, 1.0], (10, 1)))
        report = metric_report(a, b)
        self.assertEqual(set(report), {"chamfer", "emd", "combined", "normal_chamfer"})
        self.assertAlmostEqual(report["emd"]["mean"], report["emd"]["sum"] / 10)
        self.assertEqual(report["normal_chamfer"]["sum"], 0.0)

    def test_unequal_sizes_skip_emd(self):
        rng = np.random.default_rng(9)
        report = metric_report(PointCloud(rng.normal(size=(10, 3))), PointCloud(rng.normal(size=(8, 3))))
        self.assertEqual(set(report), {"chamfer"})

    def test_normal_chamfer_requires_normals(self):
        a = PointCloud(np.zeros((2, 3)))
        with self.assertRaises(GeometryError) as ctx:
            normal_chamfer(a, a)
        self.assertEqual(ctx.exception.code, "NO_NORMALS")

    def test_opposite_normals(self):
        pts = np.random.default_rng(10).normal(size=(6, 3))
        up = PointCloud(pts, normals=np.tile([0.0, 0.0, 1.0], (6, 1)))
        down = PointCloud(pts, normals=np.tile([0.0, 0.0, -1.0], (6, 1)))
        self.assertAlmostEqual(normal_chamfer(up, down), 2 * 6 * 4.0)


class TestDifferentiableLosses(unittest.TestCase):

    def test_values_match_numpy_versions(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))
        with ad.precision(np.float64):
            self.assertAlmostEqual(chamfer_tensor(ad.Tensor(a), b).item(), chamfer(a, b))
            self.assertAlmostEqual(emd_tensor(ad.Tensor(a), b).item(), emd_exact(a, b).cost, places=5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        w = LossWeights(0.5, 0.5)
        with ad.precision(np.float64):
            x = ad.Tensor(a, requires_grad=True)
            with ad.Tape() as tape:
                loss = point_cloud_loss(x, b, w)
            (grad,) = tape.backward(loss, [x])
            h = 1e-6
            numeric = np.zeros_like(a)
            for idx in np.ndindex(*a.shape):
                plus, minus = a.copy(), a.copy()
                plus[idx] += h
                minus[idx] -= h
                numeric[idx] = (combined_loss(plus, b, w) - combined_loss(minus, b, w)) / (2 * h)
        np.testing.assert_allclose(grad, numeric, atol=1e-4)


if __name__ == "__main__":
    unittest.main()
