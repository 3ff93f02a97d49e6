"""KITTI odometry file formats: binary scans and 3x4 pose lines."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud, Pose, project_to_rotation


class KittiFormatError(ValueError):
    pass


def read_kitti_scan(path: str | Path) -> PointCloud:
    """Read a KITTI .bin scan: little-endian float32 (x, y, z, intensity) quadruples.

    Intensity is discarded; the sensor origin is the local-frame zero.
    """
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise KittiFormatError(f"{path}: length {len(raw)} not divisible by 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    xyz = data[:, :3].astype(np.float64)
    bad = ~np.isfinite(xyz).all(axis=1)
    if bad.any():
        raise KittiFormatError(f"{path}: non-finite point at index {int(np.flatnonzero(bad)[0])}")
    return PointCloud(xyz, origin=np.zeros(3))


def write_kitti_scan(path: str | Path, cloud: PointCloud):
    pts = cloud.points.astype("<f4")
    data = np.zeros((pts.shape[0], 4), dtype="<f4")
    data[:, :3] = pts
    Path(path).write_bytes(data.tobytes())


def read_kitti_poses(path: str | Path) -> list[Pose]:
    """Read poses as lines of 12 reals (row-major 3x4 [R | t]).

    Rotations that drift from orthonormality by more than 1e-6 are projected
    back via SVD.
    """
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise KittiFormatError(f"{path}:{lineno}: expected 12 values, got {len(parts)}")
        try:
            vals = np.array([float(x) for x in parts], dtype=np.float64)
        except ValueError as e:
            raise KittiFormatError(f"{path}:{lineno}: {e}") from None
        m = vals.reshape(3, 4)
        r = m[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            r = project_to_rotation(r)
        poses.append(Pose(r, m[:, 3]))
    return poses


def write_kitti_poses(path: str | Path, poses: list[Pose]):
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, p.translation.reshape(3, 1)])
        lines.append(" ".join(f"{v:.12e}" for v in m.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def write_trajectory(path: str | Path, stamps: list[float], poses: list[Pose]):
    """Export a trajectory: 'timestamp tx ty tz r11 ... r33' per line."""
    if len(stamps) != len(poses):
        raise KittiFormatError(f"{len(stamps)} stamps but {len(poses)} poses")
    lines = []
    for ts, p in zip(stamps, poses):
        vals = [ts, *p.translation.tolist(), *p.rotation.ravel().tolist()]
        lines.append(" ".join(f"{v:.12e}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> tuple[list[float], list[Pose]]:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = [float(x) for x in line.split()]
        if len(parts) != 13:
            raise KittiFormatError(f"{path}:{lineno}: expected 13 values, got {len(parts)}")
        stamps.append(parts[0])
        r = np.array(parts[4:]).reshape(3, 3)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            r = project_to_rotation(r)
        poses.append(Pose(r, np.array(parts[1:4])))
    return stamps, poses
