"""Synthetic LiDAR worlds with exact ground truth.

Landmarks are axis-aligned boxes (buildings, walls and poles are thin or
tall boxes), scanned by casting rays from each trajectory pose on a fixed
azimuth/elevation grid.  Hits get Gaussian range noise and are returned in
the sensor's local frame, so a generated :class:`~descriptor_slam.dataset.Sequence`
looks exactly like a real one, but with perfect poses attached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Sequence
from .geometry import PointCloud, Pose, se3_inverse, transform_points


@dataclass(frozen=True)
class SynthWorldConfig:
    extent: float = 100.0  # side length of the square field, meters
    n_boxes: int = 40
    n_planes: int = 6
    n_poles: int = 25
    trajectory: str = "loop"  # loop | figure-eight | multi-agent-cross
    n_scans: int = 200
    n_agents: int = 2  # used by multi-agent-cross
    lidar_range: float = 60.0
    azimuth_steps: int = 180
    elevation_angles: tuple[float, ...] = (-12.0, -7.0, -3.0, 0.0, 3.0, 8.0)
    noise_sigma: float = 0.01  # meters, along-ray
    sensor_height: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in ("loop", "figure-eight", "multi-agent-cross"):
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")


@dataclass(frozen=True)
class World:
    """Axis-aligned landmark boxes as (n, 2, 3) min/max corners."""

    boxes: np.ndarray
    cfg: SynthWorldConfig
    trajectories: list[list[Pose]] = field(default_factory=list)


def _yaw_pose(x: float, y: float, z: float, yaw: float) -> Pose:
    c, s = np.cos(yaw), np.sin(yaw)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(r, np.array([x, y, z]))


def _loop_trajectory(cfg: SynthWorldConfig, n: int) -> list[Pose]:
    radius = cfg.extent * 0.3
    poses = []
    for i in range(n):
        a = 2.0 * np.pi * i / n
        x, y = radius * np.cos(a), radius * np.sin(a)
        yaw = a + np.pi / 2.0  # tangent heading, counter-clockwise
        poses.append(_yaw_pose(x, y, cfg.sensor_height, yaw))
    return poses


def _figure_eight_trajectory(cfg: SynthWorldConfig, n: int) -> list[Pose]:
    a = cfg.extent * 0.32
    poses = []
    ts = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    for t in ts:
        x = a * np.sin(t)
        y = a * np.sin(t) * np.cos(t)
        dx = a * np.cos(t)
        dy = a * np.cos(2.0 * t)
        poses.append(_yaw_pose(x, y, cfg.sensor_height, np.arctan2(dy, dx)))
    return poses


def _cross_trajectories(cfg: SynthWorldConfig, n: int) -> list[list[Pose]]:
    half = cfg.extent * 0.4
    out = []
    for agent in range(cfg.n_agents):
        angle = np.pi * agent / cfg.n_agents
        d = np.array([np.cos(angle), np.sin(angle)])
        poses = []
        for i in range(n):
            s = -half + 2.0 * half * i / max(n - 1, 1)
            x, y = s * d
            poses.append(_yaw_pose(x, y, cfg.sensor_height, angle))
        out.append(poses)
    return out


def generate_world(cfg: SynthWorldConfig) -> World:
    """Landmarks plus trajectories; landmarks keep clear of every path."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_scans
    if cfg.trajectory == "loop":
        trajectories = [_loop_trajectory(cfg, n)]
    elif cfg.trajectory == "figure-eight":
        trajectories = [_figure_eight_trajectory(cfg, n)]
    else:
        trajectories = _cross_trajectories(cfg, n)
    path_xy = np.vstack(
        [[p.translation[:2] for p in traj] for traj in trajectories]
    )

    boxes = []

    def try_add(center_xy, size_xy, height, z0=0.0):
        half = np.array([size_xy[0] / 2.0, size_xy[1] / 2.0])
        # keep a clear corridor around the trajectory
        d = np.abs(path_xy - center_xy)
        clearance = np.maximum(d - half, 0.0)
        if (np.linalg.norm(clearance, axis=1) < 2.5).any():
            return
        lo = np.array([center_xy[0] - half[0], center_xy[1] - half[1], z0])
        hi = np.array([center_xy[0] + half[0], center_xy[1] + half[1], z0 + height])
        boxes.append((lo, hi))

    half_extent = cfg.extent / 2.0
    for _ in range(cfg.n_boxes):
        center = rng.uniform(-half_extent, half_extent, size=2)
        size = rng.uniform(2.0, 8.0, size=2)
        try_add(center, size, rng.uniform(2.0, 6.0))
    for _ in range(cfg.n_planes):
        center = rng.uniform(-half_extent, half_extent, size=2)
        if rng.uniform() < 0.5:
            size = (rng.uniform(6.0, 14.0), 0.0)
        else:
            size = (0.0, rng.uniform(6.0, 14.0))
        try_add(center, size, rng.uniform(2.0, 4.0))
    for _ in range(cfg.n_poles):
        center = rng.uniform(-half_extent, half_extent, size=2)
        w = rng.uniform(0.15, 0.4)
        try_add(center, (w, w), rng.uniform(3.0, 7.0))
    if not boxes:
        raise ValueError("no landmarks survived trajectory clearance; widen the extent")
    return World(np.array(boxes), cfg, trajectories)


def _ray_directions(cfg: SynthWorldConfig) -> np.ndarray:
    az = np.linspace(0.0, 2.0 * np.pi, cfg.azimuth_steps, endpoint=False)
    el = np.deg2rad(np.asarray(cfg.elevation_angles))
    az_g, el_g = np.meshgrid(az, el, indexing="ij")
    cos_el = np.cos(el_g)
    dirs = np.stack(
        [cos_el * np.cos(az_g), cos_el * np.sin(az_g), np.sin(el_g)], axis=-1
    )
    return dirs.reshape(-1, 3)


def _ray_box_distance(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Per-ray entry distance to one AABB (inf when missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    exit_ = tmax.min(axis=1)
    hit = (enter <= exit_) & (exit_ >= 0.0)
    enter = np.where(enter >= 0.0, enter, np.inf)  # origins inside a box look forward
    return np.where(hit, enter, np.inf)


def simulate_scan(world: World, pose: Pose, scan_seed: int = 0) -> PointCloud:
    """Cast the ray grid from a pose; returns local-frame points, origin zero."""
    cfg = world.cfg
    dirs_local = _ray_directions(cfg)
    dirs_world = dirs_local @ pose.rotation.T
    origin = pose.translation
    dist = np.full(dirs_world.shape[0], np.inf)
    for lo, hi in world.boxes:
        dist = np.minimum(dist, _ray_box_distance(origin, dirs_world, lo, hi))
    hit = dist <= cfg.lidar_range
    if not hit.any():
        return PointCloud(np.empty((0, 3)), origin=np.zeros(3))
    dist = dist[hit]
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(scan_seed)
        dist = dist + rng.normal(0.0, cfg.noise_sigma, size=dist.shape)
    points_world = origin + dirs_world[hit] * dist[:, None]
    points_local = transform_points(se3_inverse(pose), points_world)
    return PointCloud(points_local, origin=np.zeros(3))


def generate_sequence(cfg: SynthWorldConfig, agent: int = 0) -> Sequence:
    """Full synthetic sequence for one agent, deterministic per seed."""
    world = generate_world(cfg)
    return sequence_from_world(world, cfg, agent)


def sequence_from_world(world: World, cfg: SynthWorldConfig, agent: int = 0) -> Sequence:
    traj = world.trajectories[agent]
    scans = [
        simulate_scan(world, pose, scan_seed=cfg.seed * 100_003 + agent * 1_009 + i)
        for i, pose in enumerate(traj)
    ]
    return Sequence(scans=scans, gt_poses=list(traj), source="synthetic")
