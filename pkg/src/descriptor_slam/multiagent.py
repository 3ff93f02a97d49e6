"""Multi-agent cooperative SLAM over a simulated message channel.

Each agent runs its own engine and broadcasts accepted keyframes through a
hub (star topology).  The channel meters exact serialized bytes against a
per-step bandwidth cap; starved messages stay queued, never dropped.  The
hub evaluates the overlap head between local keyframes and received foreign
observations, and on a verified cross registration inserts a cross edge,
pre-aligns the joining component, and jointly optimizes the union graph.
Component membership only ever coarsens (union-find).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import DegenerateGeometryError, register
from .geometry import DescriptorCloud, Pose, se3_compose, se3_inverse
from .slam.engine import SlamEngine
from .slam.graph import Edge, Observation, PoseGraph, pose_from_wire48, pose_to_wire48
from .slam.optimize import optimize_pose_graph

MESSAGE_HEADER_BYTES = 4 + 4 + 8 + 48 + 4 + 4  # sender, obs id, stamp, pose, M, C


@dataclass(frozen=True)
class DescriptorMessage:
    sender: int
    observation_id: int
    timestamp: float
    pose: Pose  # sender-frame estimate
    descriptors: DescriptorCloud  # sender-local frame
    byte_size: int

    @staticmethod
    def from_observation(sender: int, obs: Observation) -> "DescriptorMessage":
        m, c = obs.descriptors.positions.shape[0], obs.descriptors.feature_dim
        size = MESSAGE_HEADER_BYTES + m * (3 + c) * 4
        return DescriptorMessage(
            sender, obs.id, obs.timestamp, obs.pose, obs.descriptors, size
        )


def serialize_message(msg: DescriptorMessage) -> bytes:
    d = msg.descriptors
    m, c = d.positions.shape[0], d.feature_dim
    header = (
        struct.pack("<II", msg.sender, msg.observation_id)
        + struct.pack("<d", msg.timestamp)
        + pose_to_wire48(msg.pose)
        + struct.pack("<II", m, c)
    )
    payload = np.hstack([d.positions, d.features]).astype("<f4").tobytes()
    return header + payload


def deserialize_message(raw: bytes) -> DescriptorMessage:
    sender, obs_id = struct.unpack_from("<II", raw, 0)
    (ts,) = struct.unpack_from("<d", raw, 8)
    pose = pose_from_wire48(raw[16:64])
    m, c = struct.unpack_from("<II", raw, 64)
    values = np.frombuffer(raw, dtype="<f4", count=m * (3 + c), offset=72)
    data = values.astype(np.float64).reshape(m, 3 + c)
    return DescriptorMessage(
        sender, obs_id, ts, pose,
        DescriptorCloud(data[:, :3], data[:, 3:], frame_tag=f"agent{sender}"),
        len(raw),
    )


@dataclass
class ChannelStats:
    pair_bytes: dict[tuple[int, int], int] = field(default_factory=dict)
    message_count: int = 0
    cap_bytes_per_step: int | None = None

    @property
    def total_bytes(self) -> int:
        return sum(self.pair_bytes.values())

    def record(self, sender: int, receiver: int, nbytes: int):
        key = (sender, receiver)
        self.pair_bytes[key] = self.pair_bytes.get(key, 0) + nbytes
        self.message_count += 1


@dataclass
class AgentHandle:
    agent_id: int
    engine: SlamEngine
    component_id: int

    def __post_init__(self):
        if self.component_id != self.agent_id:
            raise ValueError("components start out one per agent")


@dataclass
class _InFlight:
    receiver: int
    message: DescriptorMessage
    remaining: int


class CooperativeHub:
    """Coordinates agents, the channel, cross detection and map merging."""

    def __init__(
        self,
        agents: list[SlamEngine],
        channel_enabled: bool = True,
        cap_bytes_per_step: int | None = None,
        foreign_candidate_limit: int = 50,
        recent_local_limit: int = 5,
    ):
        self.agents = [AgentHandle(e.agent_id, e, e.agent_id) for e in agents]
        self.by_id = {a.agent_id: a for a in self.agents}
        self.channel_enabled = channel_enabled
        self.stats = ChannelStats(cap_bytes_per_step=cap_bytes_per_step)
        self.queue: list[_InFlight] = []  # global FIFO
        self.foreign: dict[int, list[DescriptorMessage]] = {a.agent_id: [] for a in self.agents}
        self.cross_edges: list[Edge] = []
        self._cross_refs: list[tuple[int, int]] = []  # (agent_a, agent_b) per edge
        self.foreign_candidate_limit = foreign_candidate_limit
        self.recent_local_limit = recent_local_limit
        self.events: list[dict] = []
        self._component: dict[int, int] = {a.agent_id: a.agent_id for a in self.agents}
        self._step = 0

    # --------------------------------------------------------------
    # union-find over agents
    # --------------------------------------------------------------
    def find_component(self, agent_id: int) -> int:
        root = agent_id
        while self._component[root] != root:
            root = self._component[root]
        while self._component[agent_id] != root:
            self._component[agent_id], agent_id = root, self._component[agent_id]
        return root

    def _union(self, a: int, b: int) -> int:
        ra, rb = self.find_component(a), self.find_component(b)
        lo, hi = min(ra, rb), max(ra, rb)
        self._component[hi] = lo
        for handle in self.agents:
            handle.component_id = self.find_component(handle.agent_id)
        return lo

    def component_count(self) -> int:
        return len({self.find_component(a.agent_id) for a in self.agents})

    # --------------------------------------------------------------
    def _emit(self, event: str, **details):
        self.events.append({"step": self._step, "event": event, **details})

    def broadcast_keyframe(self, sender_id: int, obs: Observation) -> int:
        """Queue one keyframe message to every peer; returns bytes queued."""
        msg = DescriptorMessage.from_observation(sender_id, obs)
        assert msg.byte_size == len(serialize_message(msg))
        queued = 0
        for handle in self.agents:
            if handle.agent_id == sender_id:
                continue
            self.queue.append(_InFlight(handle.agent_id, msg, msg.byte_size))
            queued += msg.byte_size
        return queued

    def _transmit(self):
        """Move queued bytes, FIFO, up to the per-step cap; deliver completions."""
        budget = self.stats.cap_bytes_per_step
        spent = 0
        while self.queue:
            head = self.queue[0]
            available = head.remaining if budget is None else min(
                head.remaining, budget - spent
            )
            if available <= 0:
                break
            head.remaining -= available
            spent += available
            if head.remaining > 0:
                break
            self.queue.pop(0)
            self.foreign[head.receiver].append(head.message)
            if len(self.foreign[head.receiver]) > self.foreign_candidate_limit:
                self.foreign[head.receiver] = self.foreign[head.receiver][
                    -self.foreign_candidate_limit :
                ]
            self.stats.record(head.message.sender, head.receiver, head.message.byte_size)
            self._emit(
                "message", agent=head.receiver, sender=head.message.sender,
                observation=head.message.observation_id, bytes=head.message.byte_size,
            )

    # --------------------------------------------------------------
    def detect_cross_trajectory(self, agent_id: int) -> list[tuple[int, DescriptorMessage, float]]:
        """(local keyframe id, foreign message, probability), best first.

        No spatial pre-filter: component frames are not comparable before the
        first merge, so every buffered foreign observation is a candidate.
        """
        handle = self.by_id[agent_id]
        engine = handle.engine
        if not engine.keyframe_ids:
            return []
        local_ids = engine.keyframe_ids[-self.recent_local_limit :]
        threshold = engine.cfg.loop_probability_threshold
        scored = []
        for msg in self.foreign[agent_id]:
            if self.find_component(msg.sender) == self.find_component(agent_id):
                continue
            foreign_obs = Observation(
                msg.observation_id, msg.timestamp, msg.pose, msg.descriptors, msg.sender
            )
            for lid in local_ids:
                local_obs = engine.graph.observations[lid]
                p = engine._overlap_probability(local_obs, foreign_obs)
                if p > threshold:
                    scored.append((lid, msg, float(p)))
        scored.sort(key=lambda t: (-t[2], t[0], t[1].observation_id))
        return scored

    def _foreign_neighborhood(self, msg: DescriptorMessage) -> DescriptorCloud:
        """Merge the sender's received observations around one of them."""
        sender = self.by_id[msg.sender].engine
        obs = sender.graph.observations[msg.observation_id]
        return sender._neighborhood_cloud(obs.id)

    def merge_components(self, agent_id: int, local_id: int, msg: DescriptorMessage) -> bool:
        """Verify a cross registration and join the two components."""
        if self.find_component(agent_id) == self.find_component(msg.sender):
            return False  # same component: merging with itself is a no-op
        local_engine = self.by_id[agent_id].engine
        sender_engine = self.by_id[msg.sender].engine
        local_obs = local_engine.graph.observations[local_id]
        try:
            cloud_local = local_engine._neighborhood_cloud(local_id)
            cloud_foreign = self._foreign_neighborhood(msg)
            result = register(cloud_foreign, cloud_local, local_engine.store, local_engine.dec_cfg)
        except DegenerateGeometryError:
            self._emit("cross_rejected", agent=agent_id, reason="degenerate")
            return False
        if (
            result.inlier_ratio < local_engine.cfg.min_inlier_ratio
            or result.rmse > local_engine.cfg.max_rmse
        ):
            self._emit(
                "cross_rejected", agent=agent_id, reason="verification",
                inlier_ratio=result.inlier_ratio, rmse=result.rmse,
            )
            return False

        # rel maps the foreign observation's local frame into the local keyframe's
        rel = result.transform
        foreign_obs = sender_engine.graph.observations[msg.observation_id]
        # pre-align the non-surviving component so joint optimization starts consistent
        sender_to_local = se3_compose(
            se3_compose(local_obs.pose, rel), se3_inverse(foreign_obs.pose)
        )
        local_root = self.find_component(agent_id)
        sender_root = self.find_component(msg.sender)
        loser_root = max(local_root, sender_root)
        movers = [h for h in self.agents if self.find_component(h.agent_id) == loser_root]
        t_align = sender_to_local if loser_root == sender_root else se3_inverse(sender_to_local)
        survivor = self._union(agent_id, msg.sender)
        for h in movers:
            for oid in h.engine.graph.ordered_ids():
                obs = h.engine.graph.observations[oid]
                obs.pose = se3_compose(t_align, obs.pose)
            h.engine.resync_after_optimization()

        edge = Edge(local_id, msg.observation_id, rel, "cross", 2.0 * np.eye(6))
        self.cross_edges.append(edge)
        self._cross_refs.append((agent_id, msg.sender))
        self._emit(
            "cross_merge", agent=agent_id, sender=msg.sender,
            local=local_id, foreign=msg.observation_id, component=survivor,
        )
        self._joint_optimize(survivor)
        return True

    def _component_agents(self, component: int) -> list[AgentHandle]:
        return [h for h in self.agents if self.find_component(h.agent_id) == component]

    def _joint_optimize(self, component: int):
        members = self._component_agents(component)
        joint = PoseGraph()
        for h in members:
            for oid in h.engine.graph.ordered_ids():
                joint.add_observation(h.engine.graph.observations[oid])  # shared refs
            for e in h.engine.graph.edges:
                joint.add_edge(e)
        member_ids = {h.agent_id for h in members}
        for e, (a, b) in zip(self.cross_edges, self._cross_refs):
            if a in member_ids and b in member_ids:
                joint.add_edge(e)
        anchor_agent = self.by_id[component].engine
        anchor = anchor_agent.keyframe_ids[0]
        report = optimize_pose_graph(joint, fixed_id=anchor)
        for h in members:
            h.engine.resync_after_optimization()
        self._emit(
            "joint_optimize", component=component,
            observations=len(joint.observations), edges=len(joint.edges),
            initial_cost=report.initial_cost, final_cost=report.final_cost,
        )

    # --------------------------------------------------------------
    def step(self, scans: dict[int, "object"]):
        """Advance every agent one scan (agent-id order), then run the channel."""
        for handle in self.agents:
            scan = scans.get(handle.agent_id)
            if scan is None:
                continue
            engine = handle.engine
            engine.odometry_step(scan, float(self._step))
            self._emit("scan", agent=handle.agent_id)
            for kid in engine.new_keyframes:
                self._emit("keyframe", agent=handle.agent_id, id=kid)
                if self.channel_enabled:
                    queued = self.broadcast_keyframe(
                        handle.agent_id, engine.graph.observations[kid]
                    )
                    self._emit("broadcast", agent=handle.agent_id, id=kid, bytes=queued)
            engine.new_keyframes.clear()
        if self.channel_enabled:
            self._transmit()
            if self.component_count() > 1:
                for handle in self.agents:
                    candidates = self.detect_cross_trajectory(handle.agent_id)
                    for lid, msg, prob in candidates[:1]:
                        self._emit(
                            "cross_candidate", agent=handle.agent_id,
                            local=lid, foreign=msg.observation_id, probability=prob,
                        )
                        if self.merge_components(handle.agent_id, lid, msg):
                            break
        self._step += 1

    def drain(self, max_steps: int = 10_000):
        """Flush the in-flight queue (still respecting the per-step cap)."""
        while self.queue and max_steps > 0:
            self._transmit()
            self._step += 1
            max_steps -= 1

    def run(self, sequences: dict[int, list], drain_channel: bool = True):
        n = max(len(s) for s in sequences.values())
        for i in range(n):
            self.step({a: seq[i] for a, seq in sequences.items() if i < len(seq)})
        if self.channel_enabled and drain_channel:
            self.drain()

    def write_event_log(self, path: str | Path):
        with open(path, "w") as f:
            for ev in self.events:
                f.write(json.dumps(ev, sort_keys=True) + "\n")
