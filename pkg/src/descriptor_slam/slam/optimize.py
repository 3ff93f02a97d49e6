"""Pose-graph optimization: Levenberg-Marquardt over SE(3).

The residual of an edge is the 6-vector log of the discrepancy between the
measured and the current relative pose.  Jacobians come from central finite
differences on local pose perturbations, which keeps them independently
checkable against the residual definition.  The first observation (or a
chosen anchor) stays fixed to pin down the gauge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, perturb_pose, se3_compose, se3_inverse, so3_log
from .graph import Edge, PoseGraph


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_history: list[float]

    @property
    def improved(self) -> bool:
        return self.final_cost < self.initial_cost


def edge_residual(edge: Edge, pose_from: Pose, pose_to: Pose) -> np.ndarray:
    """log(measured^-1 . from^-1 . to) as (rotation log, translation)."""
    err = se3_compose(
        se3_inverse(edge.relative_pose), se3_compose(se3_inverse(pose_from), pose_to)
    )
    return np.concatenate([so3_log(err.rotation), err.translation])


def total_cost(graph: PoseGraph, poses: dict[int, Pose]) -> float:
    cost = 0.0
    for e in graph.edges:
        r = edge_residual(e, poses[e.from_id], poses[e.to_id])
        cost += float(r @ e.information @ r)
    return cost


def optimize_pose_graph(
    graph: PoseGraph,
    fixed_id: int | None = None,
    max_iterations: int = 50,
    rel_decrease_tol: float = 1e-9,
    fd_step: float = 1e-6,
    initial_damping: float = 1e-6,
    max_damping_retries: int = 10,
) -> OptimizeReport:
    """Minimize the total weighted squared residual; mutates observation poses.

    The total cost never increases across accepted iterations.  If the damped
    normal equations stay unsolvable through ``max_damping_retries`` damping
    increases, the graph is left exactly as it was and an
    :class:`OptimizationError` is raised.
    """
    ids = graph.ordered_ids()
    if not ids:
        return OptimizeReport(0, 0.0, 0.0, [0.0])
    if fixed_id is None:
        fixed_id = ids[0]
    if not graph.edges or len(ids) == 1:
        c = total_cost(graph, {i: graph.observations[i].pose for i in ids})
        return OptimizeReport(0, c, c, [c])

    free_ids = [i for i in ids if i != fixed_id]
    col_of = {oid: 6 * k for k, oid in enumerate(free_ids)}
    n_vars = 6 * len(free_ids)
    poses = {i: graph.observations[i].pose for i in ids}
    original = dict(poses)

    def residual_stack(current: dict[int, Pose]):
        return [edge_residual(e, current[e.from_id], current[e.to_id]) for e in graph.edges]

    def cost_of(res_list) -> float:
        return float(
            sum(r @ e.information @ r for e, r in zip(graph.edges, res_list))
        )

    def edge_jacobian(e: Edge, current):
        """Central differences of the residual wrt both endpoint perturbations."""
        blocks = {}
        for endpoint, oid in (("from", e.from_id), ("to", e.to_id)):
            if oid == fixed_id:
                continue
            jac = np.zeros((6, 6))
            base = current[oid]
            for d in range(6):
                xi = np.zeros(6)
                xi[d] = fd_step
                plus = perturb_pose(base, xi)
                minus = perturb_pose(base, -xi)
                if endpoint == "from":
                    rp = edge_residual(e, plus, current[e.to_id])
                    rm = edge_residual(e, minus, current[e.to_id])
                else:
                    rp = edge_residual(e, current[e.from_id], plus)
                    rm = edge_residual(e, current[e.from_id], minus)
                jac[:, d] = (rp - rm) / (2.0 * fd_step)
            blocks[oid] = jac
        return blocks

    res = residual_stack(poses)
    cost = cost_of(res)
    history = [cost]
    initial_cost = cost
    damping = initial_damping
    iterations = 0

    for _ in range(max_iterations):
        # assemble the damped normal equations H dx = -g
        h = np.zeros((n_vars, n_vars))
        g = np.zeros(n_vars)
        for e, r in zip(graph.edges, res):
            blocks = edge_jacobian(e, poses)
            items = list(blocks.items())
            for oid_i, j_i in items:
                ci = col_of[oid_i]
                g[ci : ci + 6] += j_i.T @ e.information @ r
                for oid_j, j_j in items:
                    cj = col_of[oid_j]
                    h[ci : ci + 6, cj : cj + 6] += j_i.T @ e.information @ j_j

        accepted = False
        for _retry in range(max_damping_retries):
            try:
                l = np.linalg.cholesky(h + damping * np.eye(n_vars))
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            dx = np.linalg.solve(l.T, np.linalg.solve(l, -g))
            candidate = {
                oid: (
                    poses[oid]
                    if oid == fixed_id
                    else perturb_pose(poses[oid], dx[col_of[oid] : col_of[oid] + 6])
                )
                for oid in ids
            }
            cand_res = residual_stack(candidate)
            cand_cost = cost_of(cand_res)
            if cand_cost <= cost:
                poses, res, cost = candidate, cand_res, cand_cost
                damping = max(damping / 3.0, 1e-12)
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            if np.linalg.norm(g) < 1e-12:
                break  # already at a stationary point
            # restore and report if we could never even solve the system
            solvable = True
            try:
                np.linalg.cholesky(h + damping * np.eye(n_vars))
            except np.linalg.LinAlgError:
                solvable = False
            if not solvable:
                for oid in ids:
                    graph.observations[oid].pose = original[oid]
                raise OptimizationError(
                    f"normal equations singular after {max_damping_retries} damping "
                    f"increases (damping={damping:.3e}, |g|={np.linalg.norm(g):.3e})"
                )
            break  # damping exhausted without improvement: accept current state
        iterations += 1
        history.append(cost)
        if len(history) >= 2:
            prev = history[-2]
            if prev > 0 and (prev - cost) / prev < rel_decrease_tol:
                break

    for oid in ids:
        graph.observations[oid].pose = poses[oid]
    return OptimizeReport(iterations, initial_cost, cost, history)
