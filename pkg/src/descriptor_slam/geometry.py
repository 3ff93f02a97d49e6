"""SE(3) poses, point/descriptor cloud containers, sampling and neighbor search.

Everything here is shared by the encoder, the registration decoder and the
SLAM engine.  All containers are immutable value objects (arrays are frozen
after construction) and all operations are pure functions, so concurrent use
is safe.  Coordinates are right-handed, z-up, in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9

# exact brute-force KNN below this point count, uniform-grid search above
KNN_BRUTE_FORCE_LIMIT = 50_000


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform: ``x_out = rotation @ x_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _freeze(np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        t = _freeze(np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise GeometryError(f"rotation is not orthonormal (max |R R^T - I| = {err:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > 1e-6:
            raise GeometryError(f"rotation has det {det:.9f}, expected +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray, reorthonormalize: bool = False) -> "Pose":
        """Build a pose from a 3x4 or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        r, t = m[:3, :3], m[:3, 3]
        if reorthonormalize:
            r = project_to_rotation(r)
        return Pose(r, t)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return transform_points(self, points)


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def se3_compose(a: Pose, b: Pose) -> Pose:
    """a after b: ``(a . b)(x) = a(b(x))``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def se3_distance(a: Pose, b: Pose) -> float:
    """Euclidean distance between the two pose positions."""
    return float(np.linalg.norm(a.translation - b.translation))


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from an axis-angle 3-vector."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-10:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector of a rotation matrix (inverse of :func:`so3_exp`)."""
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis = m[:, i] / axis[i]
            axis = axis / np.linalg.norm(axis)
        # fix the sign using the antisymmetric part where it is nonzero
        w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(w, axis) < 0:
            axis = -axis
        return theta * axis
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def pose_log(p: Pose) -> np.ndarray:
    """6-vector (rotation log, translation) chart of a pose."""
    return np.concatenate([so3_log(p.rotation), p.translation])


def perturb_pose(p: Pose, xi: np.ndarray) -> Pose:
    """Right-perturb a pose by a local 6-vector (rotation log, translation)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    return Pose(p.rotation @ so3_exp(xi[:3]), p.translation + xi[3:])


def transform_points(t: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply ``R p + t`` to each row of an (N, 3) array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return pts @ t.rotation.T + t.translation


@dataclass(frozen=True)
class PointCloud:
    """A raw scan: (N, 3) points plus the sensor position, in one frame."""

    points: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = _freeze(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        origin = _freeze(np.asarray(self.origin, dtype=np.float64).reshape(3))
        if pts.size and not np.isfinite(pts).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        if not np.isfinite(origin).all():
            raise GeometryError("point cloud origin is non-finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "origin", origin)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DescriptorCloud:
    """Sparse keypoints with learned features: the map's atomic unit.

    ``positions`` is (M, 3) in meters, ``features`` is (M, C).  ``frame_tag``
    names the coordinate frame the positions live in (a scan id or "world").
    """

    positions: np.ndarray
    features: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_tag: str = "local"

    def __post_init__(self):
        pos = _freeze(np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise GeometryError(f"features must be 2-D, got shape {feats.shape}")
        feats = _freeze(feats)
        origin = _freeze(np.asarray(self.origin, dtype=np.float64).reshape(3))
        if pos.shape[0] != feats.shape[0]:
            raise GeometryError(
                f"positions/features length mismatch: {pos.shape[0]} vs {feats.shape[0]}"
            )
        if pos.size and not np.isfinite(pos).all():
            raise GeometryError("descriptor positions contain non-finite values")
        if feats.size and not np.isfinite(feats).all():
            raise GeometryError("descriptor features contain non-finite values")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "origin", origin)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Correspondence:
    """A matched descriptor pair with its similarity score."""

    index_p: int
    index_q: int
    similarity: float


def farthest_point_sample(cloud: PointCloud, m: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of ``m`` point indices.

    The walk starts from the point farthest from the centroid (ties broken by
    lowest index), which makes the result a pure function of geometry: it is
    deterministic across runs and stable under permutation-free re-orderings.
    The ``seed`` argument is accepted for config plumbing but does not affect
    the selection.

    Returns all indices when ``m >= len(cloud)``.
    """
    del seed
    n = len(cloud)
    if n == 0:
        raise GeometryError("cannot sample from an empty cloud")
    if m < 1:
        raise GeometryError(f"sample count must be >= 1, got {m}")
    if m >= n:
        return np.arange(n)
    pts = cloud.points
    centroid = pts.mean(axis=0)
    d0 = np.linalg.norm(pts - centroid, axis=1)
    start = int(np.argmax(d0))  # argmax returns the lowest index on ties
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def merge_descriptor_clouds(
    clouds: list[DescriptorCloud] | tuple[DescriptorCloud, ...],
    poses: list[Pose] | tuple[Pose, ...],
    frame_tag: str = "merged",
) -> DescriptorCloud:
    """Union of descriptor clouds, positions mapped into a common frame.

    ``poses[i]`` maps ``clouds[i]``'s local frame into the common frame.
    Features are copied verbatim: merging never re-extracts.
    """
    if not clouds:
        raise GeometryError("cannot merge zero descriptor clouds")
    if len(clouds) != len(poses):
        raise GeometryError(f"{len(clouds)} clouds but {len(poses)} poses")
    c = clouds[0].feature_dim
    for cl in clouds[1:]:
        if cl.feature_dim != c:
            raise GeometryError(
                f"feature dimension mismatch: {c} vs {cl.feature_dim}"
            )
    positions = np.vstack([transform_points(p, cl.positions) for cl, p in zip(clouds, poses)])
    features = np.vstack([cl.features for cl in clouds])
    origin = transform_points(poses[0], clouds[0].origin.reshape(1, 3))[0]
    return DescriptorCloud(positions, features, origin=origin, frame_tag=frame_tag)


def knn(query: np.ndarray, positions: np.ndarray, k: int) -> list[tuple[int, float]]:
    """The ``min(k, N)`` nearest points to ``query``.

    Results are sorted ascending by Euclidean distance with ties broken by
    lower index.  Exact brute force below 50k points, uniform-grid search
    above (also exact: the grid only prunes cells).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    if n == 0:
        raise GeometryError("knn over empty positions")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    if n <= KNN_BRUTE_FORCE_LIMIT:
        d = np.linalg.norm(positions - q, axis=1)
        order = np.lexsort((np.arange(n), d))[: min(k, n)]
        return [(int(i), float(d[i])) for i in order]
    return _knn_grid(q, positions, k)


def _knn_grid(q: np.ndarray, positions: np.ndarray, k: int) -> list[tuple[int, float]]:
    n = positions.shape[0]
    k = min(k, n)
    lo = positions.min(axis=0)
    span = positions.max(axis=0) - lo
    # aim for a few points per cell
    cell = max(float(span.max()) / max(int(np.cbrt(n)), 1), 1e-9)
    keys = np.floor((positions - lo) / cell).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    qc = np.floor((q - lo) / cell).astype(np.int64)

    best: list[tuple[float, int]] = []  # (distance, index), kept sorted
    ring = 0
    while True:
        idx: list[int] = []
        for key, bucket in _ring_cells(qc, ring, buckets):
            idx.extend(bucket)
        if idx:
            arr = np.asarray(idx)
            d = np.linalg.norm(positions[arr] - q, axis=1)
            best.extend(zip(d.tolist(), arr.tolist()))
            best.sort()
            best = best[:k]
        # cells beyond this ring are at least (ring) * cell away from q's cell
        if len(best) == k and best[-1][0] <= ring * cell:
            break
        ring += 1
        if ring * cell > float(span.max()) + cell:  # searched everything
            break
    return [(i, d) for d, i in best[:k]]


def _ring_cells(center, ring, buckets):
    if ring == 0:
        key = tuple(center)
        if key in buckets:
            yield key, buckets[key]
        return
    r = ring
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                if max(abs(dx), abs(dy), abs(dz)) != r:
                    continue
                key = (center[0] + dx, center[1] + dy, center[2] + dz)
                if key in buckets:
                    yield key, buckets[key]


def deduplicate_points(points: np.ndarray, min_separation: float = 0.01) -> np.ndarray:
    """Indices of a subset where all pairwise distances are >= min_separation.

    Greedy over the input order: a point survives if no earlier survivor is
    closer than the threshold.  The acceleration grid is anchored at the cloud
    minimum corner, so the outcome is invariant to global translation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    lo = points.min(axis=0)
    cell = max(min_separation, 1e-12)
    keys = np.floor((points - lo) / cell).astype(np.int64)
    kept: list[int] = []
    grid: dict[tuple[int, int, int], list[int]] = {}
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for i in range(n):
        key = (int(keys[i, 0]), int(keys[i, 1]), int(keys[i, 2]))
        ok = True
        for off in offsets:
            neigh = grid.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if not neigh:
                continue
            d = np.linalg.norm(points[neigh] - points[i], axis=1)
            if (d < min_separation).any():
                ok = False
                break
        if ok:
            kept.append(i)
            grid.setdefault(key, []).append(i)
    return np.asarray(kept, dtype=np.int64)


def radius_neighbors(
    centers: np.ndarray,
    points: np.ndarray,
    radius: float,
    cap: int,
) -> list[np.ndarray]:
    """Per-center indices of points within ``radius``, nearest-first, capped.

    Ties are broken by lower index.  Uses a uniform grid anchored at the point
    cloud minimum corner so results are translation-invariant.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo = points.min(axis=0)
    cell = max(radius, 1e-9)
    keys = np.floor((points - lo) / cell).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        grid.setdefault(key, []).append(i)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    out: list[np.ndarray] = []
    for c in centers:
        ck = np.floor((c - lo) / cell).astype(np.int64)
        cand: list[int] = []
        for off in offsets:
            bucket = grid.get((int(ck[0]) + off[0], int(ck[1]) + off[1], int(ck[2]) + off[2]))
            if bucket:
                cand.extend(bucket)
        if cand:
            arr = np.asarray(cand)
            d = np.linalg.norm(points[arr] - c, axis=1)
            keep = d <= radius
            arr, d = arr[keep], d[keep]
            order = np.lexsort((arr, d))[:cap]
            out.append(arr[order])
        else:
            out.append(np.empty(0, dtype=np.int64))
    return out
