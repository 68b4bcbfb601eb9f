import unittest

import numpy as np

from cooklab.geometry import (
    adjacency_from_pairs,
    component_count,
    estimate_normals,
    farthest_point_indices,
    mean_spacing,
    perceive,
    radius_neighbors,
    radius_pairs,
    remove_penetrating,
    sample_surface,
    sdf_projection,
    surface_resample,
    voxel_downsample,
)
from cooklab.models import PointCloud
from cooklab.sdf import box, sphere


def brute_pairs(positions, radius):
    out = []
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if np.sum((positions[i] - positions[j]) ** 2) <= radius * radius:
                out.append((i, j))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def sphere_points(n, radius=0.02, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


class TestRadiusSearch(unittest.TestCase):

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for n, radius in ((50, 0.01), (200, 0.006), (120, 0.03)):
            pts = rng.uniform(-0.03, 0.03, size=(n, 3))
            np.testing.assert_array_equal(radius_pairs(pts, radius), brute_pairs(pts, radius))

    def test_negative_coordinates_and_tiny_clouds(self):
        self.assertEqual(radius_pairs(np.zeros((1, 3)), 0.1).shape, (0, 2))
        pts = np.array([[-0.5, -0.5, -0.5], [-0.45, -0.5, -0.5]])
        np.testing.assert_array_equal(radius_pairs(pts, 0.06), [[0, 1]])

    def test_radius_must_be_positive(self):
        with self.assertRaises(ValueError):
            radius_pairs(np.zeros((3, 3)), 0.0)

    def test_neighbor_lists_are_symmetric(self):
        cloud = PointCloud(np.random.default_rng(4).uniform(0, 0.02, size=(80, 3)))
        lists = radius_neighbors(cloud, 0.006)
        self.assertEqual(len(lists), 80)
        for i, neigh in enumerate(lists):
            self.assertNotIn(i, neigh)
            for j in neigh:
                self.assertIn(i, lists[j])

    def test_components(self):
        pts = np.array([[0.0, 0, 0], [0.01, 0, 0], [1.0, 0, 0], [1.01, 0, 0], [5.0, 0, 0]])
        pairs = radius_pairs(pts, 0.02)
        self.assertEqual(component_count(len(pts), pairs), 3)
        adjacency = adjacency_from_pairs(len(pts), pairs)
        self.assertEqual(len(adjacency[4]), 0)


class TestSampling(unittest.TestCase):

    def test_farthest_point_indices_are_distinct(self):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        idx = farthest_point_indices(pts, 30, np.random.default_rng(1))
        self.assertEqual(len(set(idx.tolist())), 30)

    def test_farthest_point_spreads_out(self):
        grid = np.stack(np.meshgrid(np.arange(10), np.arange(10), [0.0]), axis=-1).reshape(-1, 3) * 0.01
        idx = farthest_point_indices(grid, 4, np.random.default_rng(0))
        chosen = grid[idx]
        gaps = np.linalg.norm(chosen[:, None] - chosen[None], axis=-1) + np.eye(4)
        self.assertGreater(gaps.min(), 0.05)

    def test_resample_exact_count(self):
        cloud = PointCloud(sphere_points(500))
        result = surface_resample(cloud, 300, seed=2)
        self.assertEqual(len(result.cloud), 300)
        self.assertFalse(result.repeated)
        self.assertEqual(len(set(result.indices.tolist())), 300)

    def test_resample_deterministic(self):
        cloud = PointCloud(sphere_points(400))
        a = surface_resample(cloud, 100, seed=5)
        b = surface_resample(cloud, 100, seed=5)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_resample_small_cloud_repeats(self):
        cloud = PointCloud(sphere_points(20))
        with self.assertLogs("cooklab.geometry", level="WARNING"):
            result = surface_resample(cloud, 50)
        self.assertTrue(result.repeated)
        self.assertEqual(len(result.cloud), 50)
        self.assertEqual(set(result.indices.tolist()), set(range(20)))

    def test_voxel_downsample_merges(self):
        pts = np.array([[0.001, 0.001, 0.001], [0.002, 0.002, 0.002], [0.015, 0.0, 0.0]])
        groups = np.array([0, 0, 1])
        out = voxel_downsample(PointCloud(pts, groups=groups), 0.01)
        self.assertEqual(len(out), 2)
        np.testing.assert_allclose(sorted(out.positions[:, 0]), [0.0015, 0.015])
        self.assertEqual(sorted(out.groups.tolist()), [0, 1])

    def test_voxel_downsample_is_idempotent(self):
        pts = np.random.default_rng(3).uniform(-0.03, 0.03, size=(300, 3))
        groups = (pts[:, 0] > 0).astype(np.int64)
        once = voxel_downsample(PointCloud(pts, groups=groups), 0.01)
        twice = voxel_downsample(once, 0.01)
        self.assertLess(len(once), 300)
        np.testing.assert_array_equal(twice.positions, once.positions)
        np.testing.assert_array_equal(twice.groups, once.groups)

    def test_sample_surface_lies_on_zero_set(self):
        shape = box((0.01, 0.02, 0.005))
        pts = sample_surface(shape, 64, np.random.default_rng(0))
        self.assertEqual(len(pts), 64)
        np.testing.assert_allclose(shape.sdf(pts), 0.0, atol=1e-6)


class TestNormalsAndPerception(unittest.TestCase):

    def test_sphere_normals_point_outward(self):
        pts = sphere_points(400)
        normals = estimate_normals(PointCloud(pts), k=10)
        radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)
        self.assertGreater(np.median(np.sum(normals * radial, axis=1)), 0.98)
        self.assertTrue(np.all(np.sum(normals * radial, axis=1) >= 0))

    def test_normals_need_enough_points(self):
        with self.assertRaises(ValueError):
            estimate_normals(PointCloud(np.zeros((2, 3))), k=3)
        with self.assertRaises(ValueError):
            estimate_normals(PointCloud(sphere_points(10)), k=2)

    def test_mean_spacing_of_grid(self):
        grid = np.stack(np.meshgrid(np.arange(5), np.arange(5), np.arange(5)), axis=-1).reshape(-1, 3) * 0.004
        self.assertAlmostEqual(mean_spacing(grid), 0.004)

    def test_projection_and_removal(self):
        tool = sphere(0.01)
        pts = np.array([[0.005, 0.0, 0.0], [0.02, 0.0, 0.0]])
        projected = sdf_projection(pts, tool)
        np.testing.assert_allclose(projected[0], [0.01, 0.0, 0.0], atol=1e-6)
        np.testing.assert_array_equal(projected[1], pts[1])
        kept = remove_penetrating(PointCloud(pts), tool)
        self.assertEqual(len(kept), 1)

    def test_perceive_fixed_count_with_normals(self):
        groups = np.r_[np.zeros(500, dtype=int), np.ones(20, dtype=int)]
        pts = np.concatenate([sphere_points(500), np.full((20, 3), 0.5)])
        obs = perceive(PointCloud(pts, groups=groups), 200, seed=1)
        self.assertEqual(len(obs), 200)
        self.assertIsNotNone(obs.normals)
        self.assertLess(np.abs(obs.positions).max(), 0.021)

    def test_perceive_drops_tool_penetration(self):
        cloud = PointCloud(sphere_points(300))
        obs = perceive(cloud, 100, tools=[sphere(0.015, center=(0.02, 0.0, 0.0))])
        d = np.linalg.norm(obs.positions - [0.02, 0.0, 0.0], axis=1)
        self.assertTrue(np.all(d >= 0.015 - 1e-6))


if __name__ == "__main__":
    unittest.main()
