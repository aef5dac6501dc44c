"""Tests for point clouds, spatial queries, preprocessing and synthetic scenes."""

import itertools
import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import lie_se3
from errors import CountTooLarge, EmptyAfterFilter, InsufficientFrames, InvalidPointCloud, KTooLarge
from lie_se3 import Pose
from pointcloud import (
    PointCloud,
    ball_query,
    farthest_point_sample,
    knn,
    make_scene,
    preprocess,
    random_rigid_augment,
    random_rigid_transform,
    synth_sequence,
    synthetic_dataset,
)


def line_cloud(n=5):
    return PointCloud(np.column_stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)]))


class TestPointCloud(unittest.TestCase):

    def test_rejects_bad_shapes_and_values(self):
        with self.assertRaises(InvalidPointCloud):
            PointCloud(np.zeros((0, 3)))
        with self.assertRaises(InvalidPointCloud):
            PointCloud(np.zeros((4, 2)))
        with self.assertRaises(InvalidPointCloud):
            PointCloud(np.array([[0.0, np.nan, 1.0]]))
        with self.assertRaises(InvalidPointCloud):
            PointCloud(np.zeros((3, 3)), intensity=np.zeros(2))

    def test_records_fill_missing_attributes(self):
        cloud = PointCloud(np.ones((2, 3)), intensity=[0.5, 0.25])
        np.testing.assert_array_equal(cloud.records()[:, 3], [0.5, 0.25])
        np.testing.assert_array_equal(cloud.records()[:, 4], [0.0, 0.0])
        again = PointCloud.from_records(cloud.records(), frame_id=3)
        self.assertEqual(again.frame_id, 3)
        np.testing.assert_array_equal(again.points, cloud.points)


class TestSpatialQueries(unittest.TestCase):

    def test_fps_corner_of_unit_square(self):
        square = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
        np.testing.assert_array_equal(farthest_point_sample(square, 2, 0), [0, 3])

    def test_fps_full_count_is_permutation(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        self.assertEqual(sorted(farthest_point_sample(pts, 30, 4)), list(range(30)))
        np.testing.assert_array_equal(farthest_point_sample(pts, 1, 7), [7])

    def test_fps_count_out_of_range(self):
        with self.assertRaises(CountTooLarge):
            farthest_point_sample(np.zeros((3, 3)), 4)
        with self.assertRaises(CountTooLarge):
            farthest_point_sample(np.zeros((3, 3)), 0)

    def test_fps_greedy_max_min_by_brute_force(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(16, 3))
        selected = list(farthest_point_sample(pts, 4, 0))
        chosen = [0]
        for _ in range(3):
            rest = [i for i in range(16) if i not in chosen]
            gaps = [min(np.linalg.norm(pts[i] - pts[j]) for j in chosen) for i in rest]
            chosen.append(rest[int(np.argmax(gaps))])
        self.assertEqual(selected, chosen)

    def test_knn_on_a_line(self):
        result = knn(np.array([[1.4, 0.0, 0.0]]), line_cloud(), 2)
        self.assertEqual(sorted(result.indices[0].tolist()), [1, 2])
        np.testing.assert_allclose(result.distances[0], [0.4, 0.6])

    def test_knn_coincident_point(self):
        result = knn(np.array([[3.0, 0.0, 0.0]]), line_cloud(), 1)
        self.assertEqual(result.indices[0, 0], 3)
        self.assertEqual(result.distances[0, 0], 0.0)

    def test_knn_ties_go_to_lower_index(self):
        result = knn(np.array([[1.5, 0.0, 0.0]]), line_cloud(), 2)
        self.assertEqual(result.indices[0].tolist(), [1, 2])

    def test_knn_too_large(self):
        with self.assertRaises(KTooLarge):
            knn(line_cloud(), line_cloud(), 6)

    def test_knn_matches_brute_force(self):
        rng = np.random.default_rng(3)
        query, target = rng.normal(size=(40, 3)), rng.normal(size=(60, 3))
        result = knn(query, target, 5)
        for i, q in enumerate(query):
            d = np.linalg.norm(target - q, axis=1)
            expected = np.argsort(d, kind="stable")[:5]
            np.testing.assert_array_equal(result.indices[i], expected)
            self.assertTrue(np.all(np.diff(result.distances[i]) >= 0))

    def test_ball_query_small_radius_keeps_coincident_point(self):
        cloud = line_cloud()
        result = ball_query(cloud, cloud, 0.5, 4)
        for i in range(5):
            self.assertEqual(set(result.indices[i].tolist()), {i})
        self.assertFalse(result.fallback.any())

    def test_ball_query_large_radius_equals_knn(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(12, 3))
        balls = ball_query(pts, pts, 100.0, 12)
        np.testing.assert_array_equal(balls.indices, knn(pts, pts, 12).indices)

    def test_ball_query_empty_ball_falls_back(self):
        result = ball_query(np.array([[10.0, 0.0, 0.0]]), line_cloud(), 1.0, 3)
        self.assertTrue(result.fallback[0])
        self.assertEqual(result.indices[0].tolist(), [4, 4, 4])

    def test_ball_query_rejects_non_positive_radius(self):
        with self.assertRaises(ValueError):
            ball_query(line_cloud(), line_cloud(), 0.0, 2)


class TestPreprocess(unittest.TestCase):

    def test_downsamples_to_exact_count(self):
        pts = np.random.default_rng(0).uniform(-1.0, 1.0, size=(1000, 3))
        out = preprocess(PointCloud(pts), 512)
        self.assertEqual(len(out), 512)
        self.assertEqual(len(np.unique(out.points, axis=0)), 512)

    def test_pads_by_repetition(self):
        pts = np.random.default_rng(0).uniform(-1.0, 1.0, size=(300, 3))
        out = preprocess(PointCloud(pts), 512)
        self.assertEqual(len(out), 512)
        np.testing.assert_array_equal(out.points[:300], pts)
        np.testing.assert_array_equal(out.points[300:], pts[:212])

    def test_height_filter(self):
        pts = np.array([[0.0, 0.0, -5.0], [1.0, 0.0, 0.0], [2.0, 0.0, 11.0], [3.0, 0.0, 9.5]])
        out = preprocess(PointCloud(pts), 4)
        self.assertTrue(np.all((out.points[:, 2] >= -2.0) & (out.points[:, 2] <= 10.0)))

    def test_all_out_of_range(self):
        with self.assertRaises(EmptyAfterFilter):
            preprocess(PointCloud(np.full((10, 3), -5.0)))

    def test_seeded(self):
        pts = np.random.default_rng(9).uniform(-1.0, 1.0, size=(800, 3))
        a = preprocess(PointCloud(pts, frame_id=2), 100, seed=1)
        b = preprocess(PointCloud(pts, frame_id=2), 100, seed=1)
        np.testing.assert_array_equal(a.points, b.points)


class TestAugmentation(unittest.TestCase):

    def test_identity_augmentation(self):
        cloud = line_cloud()
        gt = lie_se3.exp([0.1, 0.2, 0.3, 0.0, 0.0, 0.2])
        out, out_gt = random_rigid_augment(cloud, gt, transform=Pose.identity())
        np.testing.assert_array_equal(out.points, cloud.points)
        np.testing.assert_allclose(out_gt.matrix(), gt.matrix())

    def test_relative_supervision_preserved(self):
        rng = np.random.default_rng(4)
        scene = make_scene(seed=1, frames=2, num_points=64)
        (c1, t1), (c2, t2) = synth_sequence(scene)
        (a1, g1), (a2, g2) = random_rigid_augment(c1, t1, rng), random_rigid_augment(c2, t2, rng)
        before = lie_se3.act(lie_se3.relative(t1, t2), c1.points)
        after = lie_se3.act(lie_se3.relative(g1, g2), a1.points)
        # each frame's sensor moved independently, so compare in the original second frame
        back = lie_se3.act(lie_se3.inverse(lie_se3.relative(t2, g2)), after)
        np.testing.assert_allclose(back, before, atol=1e-9)

    def test_rotation_preserves_distances(self):
        rng = np.random.default_rng(8)
        transform = random_rigid_transform(rng)
        cloud = PointCloud(rng.normal(size=(20, 3)))
        out, _ = random_rigid_augment(cloud, Pose.identity(), transform=transform)
        for i, j in itertools.combinations(range(20), 2):
            self.assertAlmostEqual(np.linalg.norm(out.points[i] - out.points[j]),
                                   np.linalg.norm(cloud.points[i] - cloud.points[j]), places=10)


class TestSyntheticScenes(unittest.TestCase):

    def test_stationary_frames_are_identical(self):
        sequence = synth_sequence(make_scene(seed=3, frames=4, motion="stationary", num_points=128))
        for cloud, pose in sequence[1:]:
            np.testing.assert_array_equal(cloud.points, sequence[0][0].points)
            np.testing.assert_allclose(lie_se3.relative(sequence[0][1], pose).matrix(), np.eye(4), atol=1e-15)

    def test_straight_line_steps(self):
        sequence = synth_sequence(make_scene(seed=0, frames=5, step=0.5, num_points=64))
        for (_, a), (_, b) in zip(sequence, sequence[1:]):
            self.assertAlmostEqual(np.linalg.norm(lie_se3.relative(a, b).translation), 0.5, places=12)

    def test_frames_have_requested_size(self):
        sequence = synth_sequence(make_scene(seed=2, frames=3, num_points=96, dynamic_fraction=0.2, noise_sigma=0.02))
        for i, (cloud, _) in enumerate(sequence):
            self.assertEqual(len(cloud), 96)
            self.assertEqual(cloud.frame_id, i)

    def test_same_seed_is_bit_identical(self):
        a = synthetic_dataset(2, 3, seed=11, num_points=64, noise_sigma=0.05)
        b = synthetic_dataset(2, 3, seed=11, num_points=64, noise_sigma=0.05)
        for seq_a, seq_b in zip(a, b):
            for (ca, ta), (cb, tb) in zip(seq_a, seq_b):
                self.assertEqual(ca.records().tobytes(), cb.records().tobytes())
                np.testing.assert_array_equal(ta.matrix(), tb.matrix())

    def test_rejects_short_sequences(self):
        with self.assertRaises(InsufficientFrames):
            synth_sequence(make_scene(seed=0, frames=5), frames=1)

    def test_unknown_motion(self):
        with self.assertRaises(ValueError):
            make_scene(motion="loop")


if __name__ == '__main__':
    unittest.main()
