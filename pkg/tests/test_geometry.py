"""Geometry core: poses, sampling, neighbor search, cloud merging."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from descriptor_slam.geometry import (
    Correspondence,
    DescriptorCloud,
    GeometryError,
    PointCloud,
    Pose,
    deduplicate_points,
    farthest_point_sample,
    knn,
    merge_descriptor_clouds,
    perturb_pose,
    se3_compose,
    se3_inverse,
    so3_exp,
    so3_log,
    transform_points,
)


def random_pose(rng) -> Pose:
    return Pose(so3_exp(rng.uniform(-np.pi / 2, np.pi / 2, 3)), rng.uniform(-10, 10, 3))


# ----------------------------------------------------------------------
# Pose / SE(3)
# ----------------------------------------------------------------------
class TestPose:
    def test_identity_compose_identity(self):
        e = Pose.identity()
        out = se3_compose(e, e)
        np.testing.assert_allclose(out.matrix(), np.eye(4), atol=1e-15)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = random_pose(rng)
            out = se3_compose(t, se3_inverse(t))
            np.testing.assert_allclose(out.matrix(), np.eye(4), atol=1e-9)

    def test_compose_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            # independent oracle: plain 4x4 homogeneous matrix product
            expected = a.matrix() @ b.matrix()
            np.testing.assert_allclose(se3_compose(a, b).matrix(), expected, atol=1e-12)

    def test_invalid_rotation_rejected(self):
        with pytest.raises(GeometryError):
            Pose(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(GeometryError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # reflection

    def test_so3_log_exp_round_trip(self):
        rng = np.random.default_rng(2)
        for scale in (1e-9, 0.1, 1.0, 3.0):
            w = rng.uniform(-1, 1, 3)
            w = w / np.linalg.norm(w) * scale
            np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-8)

    def test_perturb_pose_zero_is_identity(self):
        rng = np.random.default_rng(3)
        t = random_pose(rng)
        out = perturb_pose(t, np.zeros(6))
        np.testing.assert_allclose(out.matrix(), t.matrix(), atol=1e-15)


class TestTransformPoints:
    def test_identity(self):
        out = transform_points(Pose.identity(), np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])

    def test_pure_translation(self):
        t = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        out = transform_points(t, np.array([[0.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0]])

    def test_90_degree_z_rotation(self):
        # hand-written rotation matrix for +90 degrees about z
        r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        out = transform_points(Pose(r, np.zeros(3)), np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rigidity_preserves_pairwise_distances(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-50, 50, (12, 3))
        out = transform_points(random_pose(rng), pts)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)


# ----------------------------------------------------------------------
# farthest point sampling
# ----------------------------------------------------------------------
class TestFarthestPointSample:
    def test_single_point(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0]]))
        assert farthest_point_sample(cloud, 1, seed=0).tolist() == [0]

    def test_m_at_least_n_returns_all(self):
        cloud = PointCloud(np.random.default_rng(0).uniform(0, 1, (5, 3)))
        assert sorted(farthest_point_sample(cloud, 9, seed=0).tolist()) == [0, 1, 2, 3, 4]

    def test_square_corners_beat_center(self):
        # 4 corners of the unit square plus center; the optimal 4-subset by
        # exhaustive min-distance check is the corner set
        pts = np.array(
            [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0.0]], dtype=float
        )

        def min_pairwise(idx):
            sub = pts[list(idx)]
            return min(
                np.linalg.norm(sub[i] - sub[j])
                for i in range(len(sub))
                for j in range(i + 1, len(sub))
            )

        best = max(itertools.combinations(range(5), 4), key=min_pairwise)
        assert sorted(best) == [0, 1, 2, 3]  # oracle: the corners win
        chosen = sorted(farthest_point_sample(PointCloud(pts), 4, seed=0).tolist())
        assert chosen == sorted(best)

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(7)
        cloud = PointCloud(rng.uniform(-10, 10, (200, 3)))
        a = farthest_point_sample(cloud, 32, seed=5)
        b = farthest_point_sample(cloud, 32, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_min_distance_beats_uniform_random_statistically(self):
        wins = 0
        trials = 40
        for trial in range(trials):
            rng = np.random.default_rng(trial)
            pts = rng.uniform(0, 10, (150, 3))
            cloud = PointCloud(pts)
            fps_idx = farthest_point_sample(cloud, 12, seed=trial)
            rand_idx = np.random.default_rng(trial).choice(150, 12, replace=False)

            def min_d(idx):
                sub = pts[idx]
                d = np.linalg.norm(sub[:, None] - sub[None, :], axis=2)
                return d[np.triu_indices(len(idx), 1)].min()

            if min_d(fps_idx) >= min_d(rand_idx):
                wins += 1
        assert wins >= int(0.95 * trials)

    def test_empty_cloud_raises(self):
        with pytest.raises(GeometryError):
            farthest_point_sample(PointCloud(np.empty((0, 3))), 1, seed=0)


# ----------------------------------------------------------------------
# merge
# ----------------------------------------------------------------------
class TestMergeDescriptorClouds:
    def _cloud(self, rng, m=5, c=4):
        return DescriptorCloud(rng.uniform(-5, 5, (m, 3)), rng.uniform(-1, 1, (m, c)))

    def test_single_cloud_identity_pose(self):
        rng = np.random.default_rng(0)
        cloud = self._cloud(rng)
        out = merge_descriptor_clouds([cloud], [Pose.identity()])
        np.testing.assert_array_equal(out.positions, cloud.positions)
        np.testing.assert_array_equal(out.features, cloud.features)

    def test_two_disjoint_clouds_union(self):
        rng = np.random.default_rng(1)
        a, b = self._cloud(rng), self._cloud(rng)
        out = merge_descriptor_clouds([a, b], [Pose.identity(), Pose.identity()])
        assert len(out) == 10
        np.testing.assert_array_equal(out.features[:5], a.features)
        np.testing.assert_array_equal(out.features[5:], b.features)

    def test_self_merge_with_offset(self):
        rng = np.random.default_rng(2)
        a = self._cloud(rng, m=6)
        shift = Pose(np.eye(3), np.array([10.0, 0.0, 0.0]))
        out = merge_descriptor_clouds([a, a], [Pose.identity(), shift])
        assert len(out) == 12
        np.testing.assert_allclose(
            out.positions[6:], out.positions[:6] + np.array([10.0, 0.0, 0.0]), atol=1e-12
        )

    def test_mismatched_feature_dims_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(GeometryError):
            merge_descriptor_clouds(
                [self._cloud(rng, c=4), self._cloud(rng, c=5)],
                [Pose.identity(), Pose.identity()],
            )

    def test_pose_count_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(GeometryError):
            merge_descriptor_clouds([self._cloud(rng)], [])

    def test_order_insensitive_up_to_permutation(self):
        rng = np.random.default_rng(5)
        a, b = self._cloud(rng), self._cloud(rng)
        ab = merge_descriptor_clouds([a, b], [Pose.identity(), Pose.identity()])
        ba = merge_descriptor_clouds([b, a], [Pose.identity(), Pose.identity()])
        rows_ab = {tuple(np.concatenate([p, f])) for p, f in zip(ab.positions, ab.features)}
        rows_ba = {tuple(np.concatenate([p, f])) for p, f in zip(ba.positions, ba.features)}
        assert rows_ab == rows_ba


# ----------------------------------------------------------------------
# knn
# ----------------------------------------------------------------------
class TestKnn:
    def test_exact_match(self):
        pts = np.arange(30, dtype=float).reshape(10, 3)
        out = knn(pts[3], pts, 1)
        assert out == [(3, 0.0)]

    def test_k_larger_than_n(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        out = knn(np.zeros(3), pts, 10)
        assert [i for i, _ in out] == [0, 1, 2]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-10, 10, (100, 3))
        q = rng.uniform(-10, 10, 3)
        out = knn(q, pts, 5)
        d = np.linalg.norm(pts - q, axis=1)
        expected = sorted(range(100), key=lambda i: (d[i], i))[:5]
        assert [i for i, _ in out] == expected

    def test_grid_path_matches_brute_force(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 100, (60_000, 3))  # above the brute-force limit
        q = rng.uniform(0, 100, 3)
        out = knn(q, pts, 8)
        d = np.linalg.norm(pts - q, axis=1)
        expected = sorted(range(len(pts)), key=lambda i: (d[i], i))[:8]
        assert [i for i, _ in out] == expected

    def test_tie_break_lower_index(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
        out = knn(np.zeros(3), pts, 3)
        assert [i for i, _ in out] == [0, 1, 2] or [i for i, _ in out] == [0, 2, 1]
        assert out[0][0] == 0  # index 0 before index 2 at equal distance

    def test_empty_raises(self):
        with pytest.raises(GeometryError):
            knn(np.zeros(3), np.empty((0, 3)), 1)


class TestDeduplicate:
    def test_collapses_near_duplicates(self):
        pts = np.array([[0, 0, 0], [0.001, 0, 0], [1, 0, 0]], dtype=float)
        kept = deduplicate_points(pts, 0.01)
        assert kept.tolist() == [0, 2]

    def test_translation_invariant(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 5, (300, 3))
        base = deduplicate_points(pts, 0.05)
        shifted = deduplicate_points(pts + np.array([123.4, -56.7, 8.9]), 0.05)
        np.testing.assert_array_equal(base, shifted)


class TestContainers:
    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            PointCloud(np.array([[np.nan, 0, 0]]))
        with pytest.raises(GeometryError):
            DescriptorCloud(np.zeros((1, 3)), np.array([[np.inf]]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(GeometryError):
            DescriptorCloud(np.zeros((2, 3)), np.zeros((3, 4)))

    def test_correspondence_fields(self):
        c = Correspondence(1, 2, 0.5)
        assert (c.index_p, c.index_q, c.similarity) == (1, 2, 0.5)
