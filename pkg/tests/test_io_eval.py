"""KITTI parsing, sequence round trips, synthetic worlds, APE, memory report."""

import numpy as np
import pytest

from descriptor_slam.dataset import Sequence, read_sequence, write_sequence
from descriptor_slam.evaluation import ape, memory_report
from descriptor_slam.geometry import DescriptorCloud, PointCloud, Pose, so3_exp
from descriptor_slam.kitti_io import (
    KittiFormatError,
    read_kitti_poses,
    read_kitti_scan,
    read_trajectory,
    write_kitti_poses,
    write_kitti_scan,
    write_trajectory,
)
from descriptor_slam.slam.graph import Observation, PoseGraph
from descriptor_slam.synth import (
    SynthWorldConfig,
    World,
    generate_world,
    sequence_from_world,
    simulate_scan,
)


class TestKittiScan:
    def test_zero_byte_file_empty_cloud(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        assert len(read_kitti_scan(p)) == 0

    def test_hand_written_two_point_file(self, tmp_path):
        data = np.array(
            [[1.0, 2.0, 3.0, 0.5], [-4.0, 5.5, -6.25, 0.0]], dtype="<f4"
        )
        p = tmp_path / "two.bin"
        p.write_bytes(data.tobytes())
        cloud = read_kitti_scan(p)
        np.testing.assert_array_equal(cloud.points, data[:, :3].astype(np.float64))

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-50, 50, (100, 3)).astype(np.float32).astype(np.float64)
        cloud = PointCloud(pts)
        p = tmp_path / "scan.bin"
        write_kitti_scan(p, cloud)
        again = read_kitti_scan(p)
        assert again.points.tobytes() == cloud.points.tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\0" * 20)  # not divisible by 16
        with pytest.raises(KittiFormatError, match="divisible"):
            read_kitti_scan(p)

    def test_non_finite_rejected_with_index(self, tmp_path):
        data = np.zeros((3, 4), dtype="<f4")
        data[1, 0] = np.nan
        p = tmp_path / "nan.bin"
        p.write_bytes(data.tobytes())
        with pytest.raises(KittiFormatError, match="index 1"):
            read_kitti_scan(p)


class TestKittiPoses:
    def test_identity_line(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
        poses = read_kitti_poses(p)
        np.testing.assert_array_equal(poses[0].matrix(), np.eye(4))

    def test_translation_only_line(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 5 0 1 0 -2 0 0 1 7\n")
        poses = read_kitti_poses(p)
        np.testing.assert_array_equal(poses[0].translation, [5.0, -2.0, 7.0])

    def test_three_line_fixture_matches_hand_parse(self, tmp_path):
        rng = np.random.default_rng(1)
        expected = []
        lines = []
        for i in range(3):
            r = so3_exp(rng.uniform(-1, 1, 3))
            t = rng.uniform(-10, 10, 3)
            expected.append((r, t))
            m = np.hstack([r, t.reshape(3, 1)])
            lines.append(" ".join(f"{v:.17g}" for v in m.ravel()))
        p = tmp_path / "poses.txt"
        p.write_text("\n".join(lines) + "\n")
        poses = read_kitti_poses(p)
        for pose, (r, t) in zip(poses, expected):
            np.testing.assert_allclose(pose.rotation, r, atol=1e-12)
            np.testing.assert_allclose(pose.translation, t, atol=1e-12)

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3\n")
        with pytest.raises(KittiFormatError, match=":2"):
            read_kitti_poses(p)

    def test_drifted_rotation_reorthonormalized(self, tmp_path):
        r = so3_exp(np.array([0.3, -0.2, 0.5])) + 1e-4  # visible drift
        m = np.hstack([r, np.zeros((3, 1))])
        p = tmp_path / "poses.txt"
        p.write_text(" ".join(f"{v:.17g}" for v in m.ravel()) + "\n")
        pose = read_kitti_poses(p)[0]
        np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-9)


class TestTrajectoryFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        poses = [Pose(so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-5, 5, 3)) for _ in range(4)]
        stamps = [0.0, 0.5, 1.0, 1.5]
        p = tmp_path / "traj.txt"
        write_trajectory(p, stamps, poses)
        s2, p2 = read_trajectory(p)
        assert s2 == stamps
        for a, b in zip(poses, p2):
            np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-11)

    def test_line_has_13_fields(self, tmp_path):
        p = tmp_path / "traj.txt"
        write_trajectory(p, [1.5], [Pose.identity()])
        fields = p.read_text().split()
        assert len(fields) == 13
        assert float(fields[0]) == 1.5


class TestSequenceRoundTrip:
    def test_write_read(self, tmp_path):
        rng = np.random.default_rng(3)
        scans = [PointCloud(rng.uniform(-5, 5, (20, 3)).astype(np.float32)) for _ in range(3)]
        poses = [Pose(np.eye(3), np.array([float(i), 0, 0])) for i in range(3)]
        seq = Sequence(scans=scans, gt_poses=poses)
        write_sequence(seq, tmp_path / "seq")
        again = read_sequence(tmp_path / "seq")
        assert len(again) == 3
        for a, b in zip(seq.scans, again.scans):
            np.testing.assert_allclose(a.points, b.points, atol=1e-6)
        for a, b in zip(seq.gt_poses, again.gt_poses):
            np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-9)


class TestSynthWorld:
    def test_plane_hits_have_exact_x(self):
        # one zero-thickness wall at x = 10 spanning y and z, rays forward
        boxes = np.array([[[10.0, -20.0, 0.0], [10.0, 20.0, 10.0]]])
        cfg = SynthWorldConfig(noise_sigma=0.0, azimuth_steps=90, n_scans=1)
        world = World(boxes, cfg, [[Pose.identity()]])
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
        scan = simulate_scan(world, pose, scan_seed=0)
        assert len(scan) > 0
        world_pts = pose.apply(scan.points)
        np.testing.assert_allclose(world_pts[:, 0], 10.0, atol=1e-9)

    def test_same_seed_bit_identical(self):
        cfg = SynthWorldConfig(n_scans=4, seed=5, azimuth_steps=60)
        a = sequence_from_world(generate_world(cfg), cfg, 0)
        b = sequence_from_world(generate_world(cfg), cfg, 0)
        for sa, sb in zip(a.scans, b.scans):
            assert sa.points.tobytes() == sb.points.tobytes()

    def test_hits_lie_on_box_faces(self):
        cfg = SynthWorldConfig(n_scans=2, seed=6, noise_sigma=0.0, azimuth_steps=120)
        world = generate_world(cfg)
        pose = world.trajectories[0][0]
        scan = simulate_scan(world, pose, scan_seed=0)
        world_pts = pose.apply(scan.points)

        def dist_to_box(p, lo, hi):
            # distance to the surface of the AABB (zero when on a face)
            clamped = np.minimum(np.maximum(p, lo), hi)
            outside = np.linalg.norm(p - clamped)
            inside = np.min(np.minimum(p - lo, hi - p))
            return outside if outside > 0 else abs(inside)

        for p in world_pts[:200]:
            d = min(dist_to_box(p, lo, hi) for lo, hi in world.boxes)
            assert d < 1e-9

    def test_trajectory_kinds(self):
        for kind in ("loop", "figure-eight"):
            cfg = SynthWorldConfig(trajectory=kind, n_scans=10, seed=1)
            world = generate_world(cfg)
            assert len(world.trajectories) == 1
            assert len(world.trajectories[0]) == 10
        cfg = SynthWorldConfig(trajectory="multi-agent-cross", n_scans=10, n_agents=3, seed=1)
        assert len(generate_world(cfg).trajectories) == 3

    def test_unknown_trajectory_rejected(self):
        with pytest.raises(ValueError):
            SynthWorldConfig(trajectory="spiral")

    def test_loop_returns_near_start(self):
        cfg = SynthWorldConfig(trajectory="loop", n_scans=100, seed=2)
        traj = generate_world(cfg).trajectories[0]
        gap = np.linalg.norm(traj[0].translation - traj[-1].translation)
        assert gap < 2 * np.pi * cfg.extent * 0.3 / 100 * 1.5  # within ~1.5 steps


class TestApe:
    def _poses(self, positions):
        return [Pose(np.eye(3), np.asarray(p, dtype=float)) for p in positions]

    def test_identical_is_zero(self):
        poses = self._poses([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        assert ape(poses, poses) == 0.0

    def test_global_shift_removed(self):
        gt = self._poses([[0, 0, 0], [1, 0, 0], [2, 1, 0], [0, 3, 2]])
        est = [Pose(p.rotation, p.translation + np.array([100.0, 0, 0])) for p in gt]
        assert ape(est, gt) < 1e-12

    def test_global_rotation_removed(self):
        rng = np.random.default_rng(4)
        gt = self._poses(rng.uniform(-10, 10, (6, 3)))
        t = Pose(so3_exp(np.array([0.1, 0.7, -0.3])), np.array([5.0, -2.0, 1.0]))
        est = [Pose(p.rotation, t.apply(p.translation.reshape(1, 3))[0]) for p in gt]
        assert ape(est, gt) < 1e-9

    def test_hand_computed_rmse(self):
        # residuals (0, 0, 0, 2) after alignment would give RMSE 1; build a
        # symmetric case where alignment cannot reduce the single offset:
        # verified directly against the aligned-residual definition
        gt = self._poses([[0, 0, 0], [10, 0, 0], [0, 10, 0], [10, 10, 0]])
        est_pts = np.array([[0, 0, 0], [10, 0, 0], [0, 10, 0], [10, 10, 2.0]])
        est = self._poses(est_pts)
        got = ape(est, gt)
        # oracle: exhaustive Kabsch alignment done independently here
        a = est_pts - est_pts.mean(0)
        b = np.array([p.translation for p in gt]) - np.array(
            [p.translation for p in gt]
        ).mean(0)
        u, _, vt = np.linalg.svd(a.T @ b)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        r = vt.T @ np.diag([1, 1, d]) @ u.T
        res = a @ r.T - b
        expected = np.sqrt((np.linalg.norm(res, axis=1) ** 2).mean())
        assert got == pytest.approx(expected, rel=1e-12)

    def test_length_mismatch_rejected(self):
        poses = self._poses([[0, 0, 0], [1, 0, 0]])
        with pytest.raises(ValueError):
            ape(poses, poses[:1])


class TestMemoryReport:
    def _graph(self, n_keyframes, m=256, c=64):
        rng = np.random.default_rng(0)
        g = PoseGraph()
        for i in range(n_keyframes):
            g.add_observation(
                Observation(
                    i, float(i), Pose.identity(),
                    DescriptorCloud(rng.uniform(-5, 5, (m, 3)), rng.uniform(-1, 1, (m, c))),
                )
            )
        return g

    def test_empty_graph_zero_bytes(self):
        report = memory_report(PoseGraph(), Sequence(scans=[]))
        assert report.descriptor_map_bytes == 0

    def test_byte_arithmetic_ten_keyframes(self):
        g = self._graph(10)
        seq = Sequence(scans=[PointCloud(np.zeros((1, 3)))] * 10)
        report = memory_report(g, seq)
        assert report.descriptor_map_bytes == 10 * (256 * 67 * 4 + 48)
        assert report.descriptor_map_bytes == 686_560

    def test_savings_ratio_shape(self):
        g = self._graph(10)
        scans = [PointCloud(np.random.default_rng(i).uniform(-20, 20, (20_000, 3))) for i in range(10)]
        seq = Sequence(scans=scans)
        report = memory_report(g, seq)
        expected = 1.0 - (256 * 67 * 4 + 48) / (20_000 * 3 * 4)
        assert report.savings_ratio == pytest.approx(expected, rel=1e-9)
        assert report.savings_ratio > 0.5

    def test_accounting_equals_serialized_payload(self, tmp_path):
        from descriptor_slam.slam.graph import save_graph

        g = self._graph(3, m=16, c=8)
        report = memory_report(g, Sequence(scans=[]))
        # serialized payload: total file minus magic/header/structural bytes
        assert report.descriptor_map_bytes == g.payload_bytes()
        path = tmp_path / "g.bin"
        save_graph(g, path)
        structural = 16 + 3 * (4 + 4 + 8 + 4 + 4)  # header + per-obs ids/stamps/dims
        assert path.stat().st_size == structural + g.payload_bytes()
