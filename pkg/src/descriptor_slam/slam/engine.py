"""Single-agent SLAM engine.

Per scan: encode to descriptors, register against the keyframe closest to
the last position, and compose the world pose.  Scans that travel farther
than the adaptive keyframe threshold are promoted to keyframes, refined by
scan-to-map registration against the merged neighborhood, and wired into the
pose graph with an odometer edge.  New keyframes trigger loop detection
(spatial candidates filtered by the overlap head) and, on verified loops,
a loop edge plus one pose-graph optimization pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..decoder import (
    DecoderConfig,
    DegenerateGeometryError,
    correlate,
    predict_overlap,
    register,
)
from ..encoder import EncoderConfig, encode
from ..geometry import (
    DescriptorCloud,
    Pose,
    PointCloud,
    merge_descriptor_clouds,
    se3_compose,
    se3_inverse,
)
from ..nn import ParameterStore
from .graph import Edge, Observation, PoseGraph
from .optimize import optimize_pose_graph


@dataclass(frozen=True)
class SlamConfig:
    keyframe_distance_min: float = 1.0  # meters; adaptive threshold clamp
    keyframe_distance_max: float = 10.0
    keyframe_distance_init: float = 2.0
    confidence_target: float = 0.7
    adaptation_rate: float = 0.5
    loop_radius: float = 100.0  # meters, spatial candidate search
    loop_probability_threshold: float = 0.5
    map_neighbors: int = 5  # K for scan-to-map and loop neighborhoods
    min_inlier_ratio: float = 0.4
    max_rmse: float = 1.0
    temporal_guard: int = 20  # recent keyframes excluded from loop candidates
    enable_loop_closure: bool = True
    max_loop_attempts: int = 1

    def __post_init__(self):
        if not self.keyframe_distance_min < self.keyframe_distance_max:
            raise ValueError("keyframe distance bounds must satisfy min < max")
        if self.loop_radius <= 0:
            raise ValueError("loop radius must be positive")
        if not 0.0 < self.loop_probability_threshold < 1.0:
            raise ValueError("loop probability threshold must be in (0, 1)")


@dataclass
class ScanRecord:
    """Where a scan hangs off the graph: reference keyframe + relative pose."""

    timestamp: float
    ref_id: int
    rel_pose: Pose  # maps scan frame into the reference keyframe's frame
    confidence: float


class SlamEngine:
    def __init__(
        self,
        store: ParameterStore,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        cfg: SlamConfig | None = None,
        agent_id: int = 0,
        overlap_fn=None,
        id_offset: int = 0,
    ):
        self.store = store
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.cfg = cfg or SlamConfig()
        self.agent_id = agent_id
        self.id_offset = id_offset
        self.overlap_fn = overlap_fn  # (Observation, Observation) -> probability
        self.graph = PoseGraph()
        self.keyframe_ids: list[int] = []
        self.eps_keyframe = self.cfg.keyframe_distance_init
        self.records: list[ScanRecord] = []
        self.events: list[dict] = []
        self.last_pose = Pose.identity()
        self.prev_rel = Pose.identity()  # last scan-to-scan motion, for fallback
        self._scan_count = 0
        self._last_scan_pose = Pose.identity()
        self.new_keyframes: list[int] = []  # drained by the multi-agent hub

    # ------------------------------------------------------------------
    def _emit(self, event: str, **details):
        self.events.append({"event": event, **details})

    def _keyframe_positions(self) -> np.ndarray:
        return np.array(
            [self.graph.observations[i].pose.translation for i in self.keyframe_ids]
        )

    def _nearest_keyframe(self, position: np.ndarray) -> tuple[int, float]:
        positions = self._keyframe_positions()
        d = np.linalg.norm(positions - position, axis=1)
        i = int(np.lexsort((np.arange(len(d)), d))[0])
        return self.keyframe_ids[i], float(d[i])

    def _neighborhood_cloud(self, center_id: int) -> DescriptorCloud:
        """Merged descriptor clouds of K keyframes nearest the center, in its frame."""
        center = self.graph.observations[center_id]
        positions = self._keyframe_positions()
        d = np.linalg.norm(positions - center.pose.translation, axis=1)
        order = np.lexsort((np.arange(len(d)), d))[: self.cfg.map_neighbors]
        ids = [self.keyframe_ids[i] for i in order]
        center_inv = se3_inverse(center.pose)
        clouds = [self.graph.observations[i].descriptors for i in ids]
        rels = [se3_compose(center_inv, self.graph.observations[i].pose) for i in ids]
        return merge_descriptor_clouds(clouds, rels, frame_tag=f"map@{center_id}")

    # ------------------------------------------------------------------
    def odometry_step(self, scan: PointCloud, timestamp: float) -> Pose:
        scan_id = self.id_offset + self._scan_count
        self._scan_count += 1
        descriptors = encode(
            scan, self.enc_cfg, self.store, seed=scan_id, frame_tag=f"scan{scan_id}"
        )

        if not self.keyframe_ids:
            obs = Observation(scan_id, timestamp, Pose.identity(), descriptors, self.agent_id)
            self.graph.add_observation(obs)
            self.keyframe_ids.append(scan_id)
            self.new_keyframes.append(scan_id)
            self.records.append(ScanRecord(timestamp, scan_id, Pose.identity(), 1.0))
            self.last_pose = Pose.identity()
            self._last_scan_pose = Pose.identity()
            self._emit("keyframe", id=scan_id, initial=True)
            return Pose.identity()

        ref_id, _ = self._nearest_keyframe(self.last_pose.translation)
        ref = self.graph.observations[ref_id]
        try:
            result = register(descriptors, ref.descriptors, self.store, self.dec_cfg)
            pose = se3_compose(ref.pose, result.transform)
            rel_to_ref = result.transform
            confidence = result.confidence
        except DegenerateGeometryError:
            pose = se3_compose(self._last_scan_pose, self.prev_rel)
            rel_to_ref = se3_compose(se3_inverse(ref.pose), pose)
            confidence = 0.0
            self._emit("registration_degenerate", scan=scan_id)

        accepted, nearest_dist = self.keyframe_decision(pose, confidence)
        if accepted:
            try:
                map_cloud = self._neighborhood_cloud(ref_id)
                refined = register(descriptors, map_cloud, self.store, self.dec_cfg)
                rel_to_ref = refined.transform
                pose = se3_compose(ref.pose, rel_to_ref)
                confidence = refined.confidence
            except DegenerateGeometryError:
                self._emit("refine_degenerate", scan=scan_id)
            obs = Observation(scan_id, timestamp, pose, descriptors, self.agent_id)
            self.graph.add_observation(obs)
            self.graph.add_edge(
                Edge(ref_id, scan_id, rel_to_ref, "odometer", np.eye(6))
            )
            self.keyframe_ids.append(scan_id)
            self.new_keyframes.append(scan_id)
            self._emit("keyframe", id=scan_id, distance=nearest_dist, confidence=confidence)
            if self.cfg.enable_loop_closure:
                self._attempt_loop_closure(scan_id)
            pose = self.graph.observations[scan_id].pose  # optimization may move it
            rel_rec = ScanRecord(timestamp, scan_id, Pose.identity(), confidence)
        else:
            rel_rec = ScanRecord(
                timestamp, ref_id, rel_to_ref, confidence
            )

        self.records.append(rel_rec)
        self.prev_rel = se3_compose(se3_inverse(self._last_scan_pose), pose)
        self._last_scan_pose = pose
        self.last_pose = pose
        return pose

    def keyframe_decision(self, pose: Pose, confidence: float) -> tuple[bool, float]:
        """Accept iff the nearest keyframe is farther than the adaptive threshold.

        Low registration confidence widens the threshold, high confidence
        tightens it; the threshold stays clamped to its configured bounds.
        """
        _, nearest = self._nearest_keyframe(pose.translation)
        accept = nearest > self.eps_keyframe
        self.eps_keyframe = float(
            np.clip(
                self.eps_keyframe
                * (1.0 + self.cfg.adaptation_rate * (self.cfg.confidence_target - confidence)),
                self.cfg.keyframe_distance_min,
                self.cfg.keyframe_distance_max,
            )
        )
        return accept, nearest

    # ------------------------------------------------------------------
    def _overlap_probability(self, a: Observation, b: Observation) -> float:
        if self.overlap_fn is not None:
            return float(self.overlap_fn(a, b))
        pa, pb = correlate(a.descriptors, b.descriptors, self.store, self.dec_cfg)
        return predict_overlap(pa, pb, self.store, self.dec_cfg)

    def detect_loops(self, query_id: int) -> list[tuple[int, float]]:
        """Loop candidates near the query keyframe, most probable first."""
        query = self.graph.observations[query_id]
        guard = set(self.keyframe_ids[-(self.cfg.temporal_guard + 1) :])
        scored = []
        for kid in self.keyframe_ids:
            if kid in guard or kid == query_id:
                continue
            obs = self.graph.observations[kid]
            d = np.linalg.norm(obs.pose.translation - query.pose.translation)
            if d > self.cfg.loop_radius:
                continue
            p = self._overlap_probability(query, obs)
            if p > self.cfg.loop_probability_threshold:
                scored.append((kid, float(p)))
        scored.sort(key=lambda t: (-t[1], t[0]))
        return scored

    def close_loop(self, query_id: int, candidate_id: int) -> bool:
        """Map-to-map register, verify, insert the loop edge, optimize."""
        try:
            cloud_q = self._neighborhood_cloud(query_id)
            cloud_c = self._neighborhood_cloud(candidate_id)
            result = register(cloud_q, cloud_c, self.store, self.dec_cfg)
        except DegenerateGeometryError:
            self._emit("loop_rejected", query=query_id, candidate=candidate_id,
                       reason="degenerate")
            return False
        if result.inlier_ratio < self.cfg.min_inlier_ratio or result.rmse > self.cfg.max_rmse:
            self._emit(
                "loop_rejected", query=query_id, candidate=candidate_id,
                reason="verification", inlier_ratio=result.inlier_ratio, rmse=result.rmse,
            )
            return False
        self.graph.add_edge(
            Edge(candidate_id, query_id, result.transform, "loop", 2.0 * np.eye(6))
        )
        self._emit(
            "loop", query=query_id, candidate=candidate_id,
            inlier_ratio=result.inlier_ratio, rmse=result.rmse,
        )
        report = optimize_pose_graph(self.graph, fixed_id=self.keyframe_ids[0])
        self._emit(
            "optimize", edges=len(self.graph.edges),
            initial_cost=report.initial_cost, final_cost=report.final_cost,
        )
        self.resync_after_optimization()
        return True

    def resync_after_optimization(self):
        """Refresh cached pose state after graph poses move."""
        if self.records:
            rec = self.records[-1]
            ref = self.graph.observations[rec.ref_id]
            self._last_scan_pose = se3_compose(ref.pose, rec.rel_pose)
            self.last_pose = self._last_scan_pose
        elif self.keyframe_ids:
            self.last_pose = self.graph.observations[self.keyframe_ids[-1]].pose

    def _attempt_loop_closure(self, query_id: int):
        candidates = self.detect_loops(query_id)
        for kid, prob in candidates[: self.cfg.max_loop_attempts]:
            self._emit("loop_candidate", query=query_id, candidate=kid, probability=prob)
            self.close_loop(query_id, kid)

    # ------------------------------------------------------------------
    def trajectory(self) -> tuple[list[float], list[Pose]]:
        """Per-scan poses re-anchored on the (possibly optimized) keyframes."""
        stamps, poses = [], []
        for rec in self.records:
            ref = self.graph.observations[rec.ref_id]
            stamps.append(rec.timestamp)
            poses.append(se3_compose(ref.pose, rec.rel_pose))
        return stamps, poses

    def run(self, scans: list[PointCloud], timestamps: list[float] | None = None) -> list[Pose]:
        if timestamps is None:
            timestamps = [float(i) for i in range(len(scans))]
        return [self.odometry_step(s, t) for s, t in zip(scans, timestamps)]
