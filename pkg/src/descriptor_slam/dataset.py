"""Scan sequences: the unit of data for training, SLAM runs and evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import PointCloud, Pose
from .kitti_io import (
    read_kitti_poses,
    read_kitti_scan,
    write_kitti_poses,
    write_kitti_scan,
)


@dataclass
class Sequence:
    """Ordered scans with optional ground-truth poses (local frame clouds)."""

    scans: list[PointCloud]
    gt_poses: list[Pose] | None = None
    source: str = "synthetic"
    timestamps: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.gt_poses is not None and len(self.gt_poses) != len(self.scans):
            raise ValueError(
                f"{len(self.scans)} scans but {len(self.gt_poses)} ground-truth poses"
            )
        if not self.timestamps:
            self.timestamps = [float(i) for i in range(len(self.scans))]

    def __len__(self) -> int:
        return len(self.scans)


def write_sequence(seq: Sequence, out_dir: str | Path):
    """Directory layout: scans/NNNNNN.bin + poses.txt + meta.json."""
    out_dir = Path(out_dir)
    scan_dir = out_dir / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    for i, scan in enumerate(seq.scans):
        write_kitti_scan(scan_dir / f"{i:06d}.bin", scan)
    if seq.gt_poses is not None:
        write_kitti_poses(out_dir / "poses.txt", seq.gt_poses)
    meta = {
        "source": seq.source,
        "n_scans": len(seq.scans),
        "timestamps": seq.timestamps,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sequence(path: str | Path) -> Sequence:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    scans = [
        read_kitti_scan(path / "scans" / f"{i:06d}.bin") for i in range(meta["n_scans"])
    ]
    poses_file = path / "poses.txt"
    gt = read_kitti_poses(poses_file) if poses_file.exists() else None
    return Sequence(
        scans=scans,
        gt_poses=gt,
        source=meta.get("source", "unknown"),
        timestamps=[float(t) for t in meta.get("timestamps", [])],
    )
