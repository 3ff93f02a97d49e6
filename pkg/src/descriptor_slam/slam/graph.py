"""The pose-graph map: observations, relative-pose edges, serialization.

Observations keep their descriptor clouds in the local scan frame forever;
world-frame positions are always derived through the (mutable) pose, so
optimization moves poses and nothing else.

Snapshot format (magic "DPMG"): header, then per observation a structural
record plus a payload of exactly 12 float32 pose values and M*(3+C) float32
descriptor values; the payload byte count is what the memory report counts.
A JSON sidecar mirrors the structure for human inspection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import DescriptorCloud, GeometryError, Pose, so3_exp, so3_log

GRAPH_MAGIC = b"DPMG"
GRAPH_FORMAT_VERSION = 1

EDGE_KINDS = ("odometer", "loop", "cross")


@dataclass
class Observation:
    id: int
    timestamp: float
    pose: Pose  # world frame; optimization may replace it
    descriptors: DescriptorCloud  # local frame, never re-encoded
    agent_id: int = 0


@dataclass(frozen=True)
class Edge:
    from_id: int
    to_id: int
    relative_pose: Pose  # maps to_id's local frame into from_id's
    kind: str
    information: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise GeometryError(f"self edge on observation {self.from_id}")
        if self.kind not in EDGE_KINDS:
            raise GeometryError(f"unknown edge kind {self.kind!r}")
        info = np.asarray(self.information, dtype=np.float64).reshape(6, 6)
        if not np.allclose(info, info.T, atol=1e-12):
            raise GeometryError("information matrix must be symmetric")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise GeometryError("information matrix must be positive definite")
        object.__setattr__(self, "information", info)


class PoseGraph:
    def __init__(self):
        self.observations: dict[int, Observation] = {}
        self.edges: list[Edge] = []

    def add_observation(self, obs: Observation):
        if obs.id in self.observations:
            raise GeometryError(f"duplicate observation id {obs.id}")
        self.observations[obs.id] = obs

    def add_edge(self, edge: Edge):
        if edge.from_id not in self.observations or edge.to_id not in self.observations:
            raise GeometryError(
                f"edge ({edge.from_id}, {edge.to_id}) references missing observations"
            )
        self.edges.append(edge)

    def __len__(self) -> int:
        return len(self.observations)

    def ordered_ids(self) -> list[int]:
        return sorted(self.observations.keys())

    def positions(self) -> np.ndarray:
        ids = self.ordered_ids()
        return np.array([self.observations[i].pose.translation for i in ids])

    def payload_bytes(self) -> int:
        """Exact serialized payload size: pose plus descriptors per observation."""
        total = 0
        for obs in self.observations.values():
            m, c = obs.descriptors.positions.shape[0], obs.descriptors.feature_dim
            total += 12 * 4 + m * (3 + c) * 4
        return total


def pose_to_wire48(pose: Pose) -> bytes:
    """12 float32 slots: rotation log, translation, zero padding.

    The axis-angle encoding keeps round trips byte-stable: decoding always
    yields an exactly orthonormal rotation, and re-encoding reproduces the
    same float32 words (log of exp is identity well below float32 precision).
    """
    vals = np.zeros(12, dtype="<f4")
    vals[:3] = so3_log(pose.rotation).astype("<f4")
    vals[3:6] = pose.translation.astype("<f4")
    return vals.tobytes()


def pose_from_wire48(raw: bytes) -> Pose:
    vals = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return Pose(so3_exp(vals[:3]), vals[3:6])


def save_graph(graph: PoseGraph, path: str | Path) -> Path:
    path = Path(path)
    chunks = [
        GRAPH_MAGIC,
        struct.pack("<III", GRAPH_FORMAT_VERSION, len(graph.observations), len(graph.edges)),
    ]
    sidecar = {"format_version": GRAPH_FORMAT_VERSION, "observations": [], "edges": []}
    for oid in graph.ordered_ids():
        obs = graph.observations[oid]
        d = obs.descriptors
        m, c = d.positions.shape[0], d.feature_dim
        chunks.append(struct.pack("<IId II", obs.id, obs.agent_id, obs.timestamp, m, c))
        chunks.append(pose_to_wire48(obs.pose))
        payload = np.hstack([d.positions, d.features]).astype("<f4")
        chunks.append(payload.tobytes())
        sidecar["observations"].append(
            {"id": obs.id, "agent_id": obs.agent_id, "timestamp": obs.timestamp,
             "m": m, "c": c, "position": obs.pose.translation.tolist()}
        )
    for e in graph.edges:
        chunks.append(
            struct.pack("<IIB", e.from_id, e.to_id, EDGE_KINDS.index(e.kind))
        )
        chunks.append(pose_to_wire48(e.relative_pose))
        chunks.append(e.information.astype("<f4").tobytes())
        sidecar["edges"].append({"from": e.from_id, "to": e.to_id, "kind": e.kind})
    path.write_bytes(b"".join(chunks))
    path.with_suffix(path.suffix + ".sidecar.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )
    return path


def load_graph(path: str | Path) -> PoseGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != GRAPH_MAGIC:
        raise GeometryError(f"{path}: bad magic {raw[:4]!r}")
    version, n_obs, n_edges = struct.unpack_from("<III", raw, 4)
    if version != GRAPH_FORMAT_VERSION:
        raise GeometryError(f"{path}: version {version}, expected {GRAPH_FORMAT_VERSION}")
    off = 16
    graph = PoseGraph()
    for _ in range(n_obs):
        oid, agent, ts, m, c = struct.unpack_from("<IId II", raw, off)
        off += struct.calcsize("<IId II")
        pose = pose_from_wire48(raw[off : off + 48])
        off += 48
        count = m * (3 + c)
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        data = values.reshape(m, 3 + c)
        graph.add_observation(
            Observation(
                id=oid, timestamp=ts, pose=pose,
                descriptors=DescriptorCloud(data[:, :3], data[:, 3:], frame_tag=f"scan{oid}"),
                agent_id=agent,
            )
        )
    for _ in range(n_edges):
        f, t, kind = struct.unpack_from("<IIB", raw, off)
        off += struct.calcsize("<IIB")
        rel = pose_from_wire48(raw[off : off + 48])
        off += 48
        info = np.frombuffer(raw, dtype="<f4", count=36, offset=off).astype(np.float64)
        info = info.reshape(6, 6)
        info = (info + info.T) / 2.0  # float32 round trip can break exact symmetry
        off += 144
        graph.add_edge(Edge(f, t, rel, EDGE_KINDS[kind], info))
    if off != len(raw):
        raise GeometryError(f"{path}: {len(raw) - off} trailing bytes")
    return graph
