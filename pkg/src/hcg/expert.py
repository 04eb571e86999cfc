"""Geometric expert: grasp goal sampling, visibility-graph planning, demonstrations.

The planner routes a reference point on the gripper (the body center, midway
along the stem) through a visibility graph over obstacle disks inflated by the
body's bounding radius, so every heading along the path is collision-free.  The
route ends at a pre-grasp pose backed off along the approach axis; the last
waypoint slides straight in to the grasp.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from . import sim
from .geometry import Pose

log = logging.getLogger(__name__)

T_PLAN = 30
N_GOALS = 16
BODY_CENTER_OFFSET = 0.05
# bounding radius of the capsule body around the body center, plus margin
BODY_INFLATION = 0.10
TARGET_INFLATION = 0.03
PREGRASP_BACKOFF = 0.04
APPROACH_CLEARANCE = 0.004
POLY_SIDES = 16


@dataclass
class GraspGoal:
    pose: Pose
    approach_angle: float
    goal_id: int

    @property
    def config(self) -> np.ndarray:
        return geo.planar_config(self.pose)


def body_center(config) -> np.ndarray:
    x, y, yaw = config
    return np.array([x + BODY_CENTER_OFFSET * math.cos(yaw), y + BODY_CENTER_OFFSET * math.sin(yaw)])


def palm_from_center(bc, yaw) -> np.ndarray:
    return np.array([bc[0] - BODY_CENTER_OFFSET * math.cos(yaw), bc[1] - BODY_CENTER_OFFSET * math.sin(yaw), yaw])


def pregrasp_config(goal_cfg) -> np.ndarray:
    x, y, yaw = goal_cfg
    return np.array([x - PREGRASP_BACKOFF * math.cos(yaw), y - PREGRASP_BACKOFF * math.sin(yaw), yaw])


def _planning_disks(scene: sim.Scene):
    c = np.vstack([scene.obstacle_centers, scene.target_center[None]])
    r = np.concatenate([scene.obstacle_radii + BODY_INFLATION, [scene.target_radius + TARGET_INFLATION]])
    return c, r


def sample_grasp_goals(scene: sim.Scene) -> list[GraspGoal]:
    """Up to 16 evenly spaced approach angles whose grasp and approach are clear."""
    c, r = _planning_disks(scene)
    goals = []
    for k in range(N_GOALS):
        ang = 2 * math.pi * k / N_GOALS
        cfg = sim.canonical_grasp_config(scene, ang)
        if not sim.grasp_predicate(scene, cfg):
            continue
        pre = pregrasp_config(cfg)
        if scene.n_obstacles:
            if sim.body_clearance(cfg, scene.obstacle_centers, scene.obstacle_radii) < APPROACH_CLEARANCE:
                continue
            if sim.swept_collision(scene, pre, cfg):
                continue
        if np.any(np.linalg.norm(c - body_center(pre), axis=1) < r):
            continue
        goals.append(GraspGoal(geo.planar_pose(*cfg), ang, k))
    return goals


def _segments_clear(p, q, centers, radii) -> np.ndarray:
    """Pairwise visibility for segment arrays p (..., 2), q (..., 2)."""
    if len(radii) == 0:
        return np.ones(np.broadcast_shapes(p.shape, q.shape)[:-1], dtype=bool)
    d = sim.point_segment_distance(centers, p[..., None, :], q[..., None, :])
    return np.all(d >= radii, axis=-1)


def _in_bounds(p, ws) -> np.ndarray:
    (x0, x1), (y0, y1) = ws
    return (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)


class VisibilityGraph:
    """Visibility graph over inflated disks with a fixed start node."""

    def __init__(self, scene: sim.Scene, start_bc):
        self.scene = scene
        self.centers, self.radii = _planning_disks(scene)
        verts = []
        k = np.arange(POLY_SIDES)
        for c, r in zip(self.centers, self.radii):
            rr = r / math.cos(math.pi / POLY_SIDES) + 1e-7
            verts.append(c + rr * np.stack([np.cos(2 * math.pi * k / POLY_SIDES), np.sin(2 * math.pi * k / POLY_SIDES)], 1))
        v = np.vstack(verts) if verts else np.zeros((0, 2))
        if len(v):
            free = np.all(np.linalg.norm(v[:, None] - self.centers[None], axis=2) >= self.radii, axis=1)
            v = v[free & _in_bounds(v, scene.workspace)]
        self.nodes = np.vstack([np.asarray(start_bc)[None], v])
        n = len(self.nodes)
        vis = _segments_clear(self.nodes[:, None, :], self.nodes[None, :, :], self.centers, self.radii)
        np.fill_diagonal(vis, False)
        self.adj = vis
        self.dist = np.where(vis, np.linalg.norm(self.nodes[:, None] - self.nodes[None], axis=2), np.inf)
        self._sp = self._dijkstra(n)

    def _dijkstra(self, n):
        best = np.full(n, np.inf)
        prev = np.full(n, -1)
        best[0] = 0.0
        heap = [(0.0, 0)]
        done = np.zeros(n, dtype=bool)
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            nbr = np.nonzero(self.adj[u] & ~done)[0]
            nd = d + self.dist[u, nbr]
            better = nd < best[nbr]
            for v, dv in zip(nbr[better], nd[better]):
                best[v] = dv
                prev[v] = u
                heapq.heappush(heap, (float(dv), int(v)))
        return best, prev

    def path_to(self, goal_bc) -> Optional[list]:
        goal_bc = np.asarray(goal_bc, dtype=np.float64)
        if np.any(np.linalg.norm(self.centers - goal_bc, axis=1) < self.radii):
            return None
        vis = _segments_clear(self.nodes, np.broadcast_to(goal_bc, self.nodes.shape), self.centers, self.radii)
        best, prev = self._sp
        total = np.where(vis, best + np.linalg.norm(self.nodes - goal_bc, axis=1), np.inf)
        last = int(np.argmin(total))
        if not np.isfinite(total[last]):
            return None
        idx = [last]
        while idx[-1] != 0:
            idx.append(int(prev[idx[-1]]))
        pts = [self.nodes[i] for i in reversed(idx)] + [goal_bc]
        return shortcut(pts, self.centers, self.radii)


def shortcut(pts: Sequence[np.ndarray], centers, radii) -> list:
    """Greedy shortcutting: jump to the farthest directly visible vertex."""
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _segments_clear(pts[i], pts[j], centers, radii):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def resample_polyline(pts: Sequence[np.ndarray], n: int) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], n)
    out = np.empty((n, 2))
    for d in range(2):
        out[:, d] = np.interp(s, cum, pts[:, d])
    return out


def polyline_length(pts) -> float:
    return float(np.linalg.norm(np.diff(np.asarray(pts), axis=0), axis=1).sum())


def plan_is_valid(scene: sim.Scene, plan: Sequence[Pose]) -> bool:
    cfgs = [geo.planar_config(T) for T in plan]
    for k in range(len(plan) - 1):
        a = geo.extract_expert_action(plan, k)
        if np.linalg.norm(a.translation) > sim.MAX_STEP_TRANS + 1e-9:
            return False
        if abs(geo.yaw_of(a)) > sim.MAX_STEP_YAW + 1e-9:
            return False
        if sim.swept_collision(scene, cfgs[k], cfgs[k + 1]):
            return False
        if k + 1 < len(plan) - 1 and sim.grasp_predicate(scene, cfgs[k + 1]):
            return False
    return sim.grasp_predicate(scene, cfgs[-1])


def plan_trajectory(scene: sim.Scene, start: Pose, goal: GraspGoal, graph: Optional[VisibilityGraph] = None):
    """Collision-free ``T_PLAN``-waypoint plan to ``goal``; ``None`` on failure."""
    start_cfg = geo.planar_config(start)
    goal_cfg = goal.config
    pre = pregrasp_config(goal_cfg)
    if graph is None:
        graph = VisibilityGraph(scene, body_center(start_cfg))
    route = graph.path_to(body_center(pre))
    if route is None:
        return None
    bcs = resample_polyline(route, T_PLAN - 1)
    dyaw = geo.wrap_angle(goal_cfg[2] - start_cfg[2])
    yaws = start_cfg[2] + dyaw * np.linspace(0.0, 1.0, T_PLAN - 1)
    cfgs = [palm_from_center(bc, yw) for bc, yw in zip(bcs, yaws)]
    cfgs[0] = start_cfg
    cfgs[-1] = pre
    cfgs.append(goal_cfg)
    plan = [geo.planar_pose(*c) for c in cfgs]
    plan[0] = start
    if not plan_is_valid(scene, plan):
        return None
    return plan


def plan_all_goals(scene: sim.Scene, start: Optional[Pose] = None):
    """``[(goal, plan)]`` for every goal the expert can reach."""
    start = start if start is not None else scene.start_pose()
    goals = sample_grasp_goals(scene)
    if not goals:
        return []
    graph = VisibilityGraph(scene, body_center(geo.planar_config(start)))
    out = []
    for g in goals:
        plan = plan_trajectory(scene, start, g, graph)
        if plan is not None:
            out.append((g, plan))
    return out


def is_feasible(scene: sim.Scene) -> bool:
    if sim.in_collision(scene, scene.start):
        return False
    return len(plan_all_goals(scene)) > 0
