"""Planar cluttered-scene grasping simulator.

A free-flying gripper moves in the table plane among disk obstacles.  The
gripper body is a set of capsules whose footprint comes from the gripper
points: each point ``(x, 0, z)`` maps to planar ``(forward=z, lateral=x)`` in the
gripper frame, so the fingers point along the gripper's local +x axis (its
heading).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import geometry as geo
from .geometry import Pose

T_MAX = 60
N_PTS = 512
SIGMA_OBS = 0.002
GRASP_TOL_POS = 0.02
GRASP_TOL_YAW = 0.2
MAX_STEP_TRANS = 0.05
MAX_STEP_YAW = 0.3
VOXEL = 0.01
BOUNDARY_SPACING = 0.008
WORKSPACE = ((-0.5, 0.5), (-0.5, 0.5))
MAX_OBSTACLES = 7

CAPSULE_RADIUS = 0.01
GRASP_DEPTH = 0.08  # pinch center, forward of the palm
SWEEP_RES = 0.004

# planar body segments (forward, lateral) derived from the gripper points
_PALM, _TIP_L, _TIP_R, _KNK_L, _KNK_R = [(p[2], p[0]) for p in geo.GRIPPER_POINTS]
BODY_SEGMENTS = np.array(
    [
        [_PALM, ((_KNK_L[0] + _KNK_R[0]) / 2, 0.0)],  # stem
        [_KNK_R, _KNK_L],  # palm bar
        [_KNK_L, _TIP_L],  # left finger
        [_KNK_R, _TIP_R],  # right finger
    ]
)
FINGER_IDX = (2, 3)
BODY_REACH = float(np.max(np.linalg.norm(BODY_SEGMENTS.reshape(-1, 2), axis=1)))


class SceneError(RuntimeError):
    pass


class Outcome(str, Enum):
    ONGOING = "ongoing"
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"


@dataclass
class Scene:
    target_center: np.ndarray
    target_radius: float
    obstacle_centers: np.ndarray  # (K, 2)
    obstacle_radii: np.ndarray  # (K,)
    start: np.ndarray = field(default_factory=lambda: np.array([-0.35, 0.0, 0.0]))  # (x, y, yaw)
    seed: Optional[int] = None
    workspace: tuple = WORKSPACE
    grasp_tolerance: tuple = (GRASP_TOL_POS, GRASP_TOL_YAW)

    def __post_init__(self):
        self.target_center = np.asarray(self.target_center, dtype=np.float64).reshape(2)
        self.obstacle_centers = np.asarray(self.obstacle_centers, dtype=np.float64).reshape(-1, 2)
        self.obstacle_radii = np.asarray(self.obstacle_radii, dtype=np.float64).reshape(-1)
        self.start = np.asarray(self.start, dtype=np.float64).reshape(3)
        self.target_radius = float(self.target_radius)

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacle_radii)

    def start_pose(self) -> Pose:
        return geo.planar_pose(*self.start)

    def disks(self):
        """All disks, target first: centers (K+1, 2), radii (K+1,)."""
        c = np.vstack([self.target_center[None], self.obstacle_centers])
        r = np.concatenate([[self.target_radius], self.obstacle_radii])
        return c, r

    def validate(self):
        (x0, x1), (y0, y1) = self.workspace
        c, r = self.disks()
        if np.any(c[:, 0] - r < x0) or np.any(c[:, 0] + r > x1) or np.any(c[:, 1] - r < y0) or np.any(c[:, 1] + r > y1):
            raise SceneError("disk outside workspace")
        d = np.linalg.norm(self.obstacle_centers - self.target_center, axis=1)
        if np.any(d < self.obstacle_radii + self.target_radius):
            raise SceneError("target intersects an obstacle")
        if self.n_obstacles > MAX_OBSTACLES:
            raise SceneError(f"too many obstacles: {self.n_obstacles}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "workspace": [list(self.workspace[0]), list(self.workspace[1])],
            "target": {"center": self.target_center.tolist(), "radius": self.target_radius},
            "obstacles": [
                {"center": c.tolist(), "radius": float(r)} for c, r in zip(self.obstacle_centers, self.obstacle_radii)
            ],
            "tolerances": {"position": self.grasp_tolerance[0], "yaw": self.grasp_tolerance[1]},
            "start": self.start.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        obs = d.get("obstacles", [])
        tol = d.get("tolerances", {})
        ws = d.get("workspace", WORKSPACE)
        return cls(
            target_center=d["target"]["center"],
            target_radius=d["target"]["radius"],
            obstacle_centers=np.array([o["center"] for o in obs]).reshape(-1, 2),
            obstacle_radii=np.array([o["radius"] for o in obs]),
            start=d.get("start", [-0.35, 0.0, 0.0]),
            seed=d.get("seed"),
            workspace=(tuple(ws[0]), tuple(ws[1])),
            grasp_tolerance=(tol.get("position", GRASP_TOL_POS), tol.get("yaw", GRASP_TOL_YAW)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Observation:
    points: np.ndarray  # (N, 3) gripper frame
    mask: np.ndarray  # (N,) 1 target, 0 obstacle
    config: np.ndarray  # (3,) palm (x, y, yaw)

    def __len__(self):
        return len(self.mask)

    def features(self) -> np.ndarray:
        """(N, 7) per-point tuples: position, configuration, mask."""
        n = len(self.mask)
        return np.hstack([self.points, np.broadcast_to(self.config, (n, 3)), self.mask[:, None]])


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    outcome: Outcome


# -- collision geometry ----------------------------------------------------


def body_segments_world(config) -> np.ndarray:
    """Capsule segments (..., 4, 2, 2) in the base frame for palm configs (..., 3)."""
    config = np.asarray(config, dtype=np.float64)
    yaw = config[..., 2]
    h = np.stack([np.cos(yaw), np.sin(yaw)], axis=-1)[..., None, None, :]
    n = np.stack([-np.sin(yaw), np.cos(yaw)], axis=-1)[..., None, None, :]
    seg = BODY_SEGMENTS
    return config[..., None, None, :2] + seg[..., :1] * h + seg[..., 1:] * n


def point_segment_distance(p, a, b) -> np.ndarray:
    """Distances from points ``p`` (..., 2) to segments ``a``-``b`` (broadcast)."""
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    u = np.where(denom > 0, np.sum((p - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    u = np.clip(u, 0.0, 1.0)
    closest = a + u[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def body_clearance(config, centers, radii, segments=None):
    """Minimum surface gap between the body capsules and the given disks.

    ``config`` may be a single (3,) config (returns a float) or (M, 3).
    """
    config = np.asarray(config, dtype=np.float64)
    if len(radii) == 0:
        return math.inf if config.ndim == 1 else np.full(len(config), math.inf)
    seg = body_segments_world(config)
    if segments is not None:
        seg = seg[..., list(segments), :, :]
    d = point_segment_distance(centers[:, None, :], seg[..., None, :, 0, :], seg[..., None, :, 1, :])
    gap = (d - radii[:, None] - CAPSULE_RADIUS).min(axis=(-1, -2))
    return float(gap) if config.ndim == 1 else gap


def interpolate_configs(c0, c1, res: float = SWEEP_RES) -> tuple[np.ndarray, float]:
    """Sample the straight palm/yaw interpolation so body points move < ``res``.

    Returns the samples and half the maximum body-point displacement between
    consecutive samples (the conservative inflation for static checks).
    """
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    dyaw = geo.wrap_angle(c1[2] - c0[2])
    dp = float(np.linalg.norm(c1[:2] - c0[:2]))
    span = dp + (BODY_REACH + CAPSULE_RADIUS) * abs(dyaw)
    n = max(1, int(math.ceil(span / res)))
    s = np.linspace(0.0, 1.0, n + 1)
    cfg = np.empty((n + 1, 3))
    cfg[:, :2] = c0[:2] + s[:, None] * (c1[:2] - c0[:2])
    cfg[:, 2] = c0[2] + s * dyaw
    return cfg, 0.5 * span / n


def swept_collision(scene: Scene, c0, c1) -> bool:
    """Conservative swept capsule-vs-disk test for a motion between palm configs."""
    if scene.n_obstacles == 0:
        return False
    cfgs, inflate = interpolate_configs(c0, c1)
    gaps = body_clearance(cfgs, scene.obstacle_centers, scene.obstacle_radii)
    return bool(np.any(gaps < inflate))


def in_collision(scene: Scene, config) -> bool:
    return body_clearance(config, scene.obstacle_centers, scene.obstacle_radii) < 0.0


def canonical_grasp_config(scene: Scene, approach_angle: float) -> np.ndarray:
    """Palm config approaching from ``approach_angle`` (bearing target -> palm)."""
    u = np.array([math.cos(approach_angle), math.sin(approach_angle)])
    palm = scene.target_center + GRASP_DEPTH * u
    return np.array([palm[0], palm[1], geo.wrap_angle(approach_angle + math.pi)])


def grasp_predicate(scene: Scene, config) -> bool:
    x, y, yaw = config
    h = np.array([math.cos(yaw), math.sin(yaw)])
    pinch = np.array([x, y]) + GRASP_DEPTH * h
    tol_pos, tol_yaw = scene.grasp_tolerance
    if np.linalg.norm(pinch - scene.target_center) > tol_pos:
        return False
    to_target = scene.target_center - np.array([x, y])
    bearing = math.atan2(to_target[1], to_target[0])
    if abs(geo.wrap_angle(yaw - bearing)) > tol_yaw:
        return False
    if scene.n_obstacles and body_clearance(config, scene.obstacle_centers, scene.obstacle_radii, FINGER_IDX) < 0:
        return False
    return True


def check_grasp_success(scene: Scene, gripper: Pose) -> bool:
    return grasp_predicate(scene, geo.planar_config(gripper))


# -- perception ------------------------------------------------------------


def render_observation(scene: Scene, gripper: Pose, rng: np.random.Generator, sigma: float = SIGMA_OBS):
    """Visible boundary points in the gripper frame.

    Returns ``(points (N, 3), mask (N,))``.  A boundary point is visible when it
    faces the camera at the palm and the sight line crosses no other disk.
    """
    cfg = geo.planar_config(gripper)
    eye = cfg[:2]
    centers, radii = scene.disks()
    pts, labels, owner = [], [], []
    for k, (c, r) in enumerate(zip(centers, radii)):
        n = max(8, int(math.ceil(2 * math.pi * r / BOUNDARY_SPACING)))
        ang = rng.uniform(0, 2 * math.pi) + np.arange(n) * (2 * math.pi / n)
        pts.append(c + r * np.stack([np.cos(ang), np.sin(ang)], axis=1))
        labels.append(np.full(n, 1.0 if k == 0 else 0.0))
        owner.append(np.full(n, k))
    p = np.vstack(pts)
    lab = np.concatenate(labels)
    own = np.concatenate(owner)
    facing = np.sum((p - centers[own]) * (eye - p), axis=1) > 0
    d = point_segment_distance(centers[None, :, :], eye[None, None, :], p[:, None, :])  # (P, K)
    blocked = d < radii[None, :]
    blocked[np.arange(len(p)), own] = False
    vis = facing & ~blocked.any(axis=1)
    p = p[vis]
    lab = lab[vis]
    if sigma > 0 and len(p):
        p = p + rng.normal(0.0, sigma, size=p.shape)
    p3 = np.hstack([p, np.zeros((len(p), 1))])
    return geo.transform_points(gripper, p3), lab


@dataclass
class Frame:
    step: int
    pose: Pose
    points: np.ndarray  # gripper frame at capture time
    mask: np.ndarray


def aggregate_observation(history: list, t: Optional[int] = None, rng=None, n_pts: int = N_PTS) -> Observation:
    """Fuse frames up to step ``t`` into the gripper frame of step ``t``."""
    if not history:
        raise ValueError("empty history")
    frames = [f for f in history if t is None or f.step <= t]
    cur = max(frames, key=lambda f: f.step)
    base, masks, stamps = [], [], []
    for f in frames:
        base.append(geo.transform_points(geo.inverse(f.pose), f.points))
        masks.append(f.mask)
        stamps.append(np.full(len(f.mask), f.step))
    pb = np.vstack(base) if base else np.zeros((0, 3))
    mk = np.concatenate(masks)
    st = np.concatenate(stamps)
    if len(pb) > 0 and len(frames) > 1:
        keys = np.floor(pb / VOXEL).astype(np.int64)
        # newest first; ties within a frame keep the first point
        order = np.lexsort((np.arange(len(st)), -st))
        _, first = np.unique(keys[order], axis=0, return_index=True)
        keep = np.sort(order[first])
        pb, mk = pb[keep], mk[keep]
    if len(pb) > n_pts:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = np.sort(rng.choice(len(pb), n_pts, replace=False))
        pb, mk = pb[keep], mk[keep]
    pts = geo.transform_points(cur.pose, pb)
    return Observation(points=pts, mask=mk.astype(np.float64), config=geo.planar_config(cur.pose))


def subsample_points(obs: Observation, m: int, rng: np.random.Generator) -> Observation:
    """Exactly ``m`` points for a network input, with a quarter reserved for the target.

    Short clouds are padded by cycling through the points, which leaves any
    max-pooled encoding unchanged.  An empty cloud becomes one point at the
    gripper origin tagged as obstacle.
    """
    n = len(obs.mask)
    if n == 0:
        return Observation(np.zeros((m, 3)), np.zeros(m), obs.config.copy())
    if n > m:
        tgt = np.flatnonzero(obs.mask > 0.5)
        oth = np.flatnonzero(obs.mask <= 0.5)
        k_t = min(len(tgt), max(m // 4, m - len(oth)))
        k_o = m - k_t
        idx = np.concatenate([rng.choice(tgt, k_t, replace=False), rng.choice(oth, k_o, replace=False)])
        idx = np.sort(idx)
    else:
        idx = np.arange(m) % n
    return Observation(obs.points[idx], obs.mask[idx], obs.config.copy())


# -- environment -----------------------------------------------------------


def project_action(action: Pose) -> Pose:
    """Planar projection plus per-step clamping of a relative action."""
    a = geo.project_planar(action)
    t = a.translation.copy()
    n = np.linalg.norm(t)
    if n > MAX_STEP_TRANS:
        t *= MAX_STEP_TRANS / n
    yaw = min(MAX_STEP_YAW, max(-MAX_STEP_YAW, geo.yaw_of(a)))
    return Pose(geo.rotz(yaw).rotation, t)


class GraspSim:
    """One episode of the grasping MDP.

    ``rng`` drives observation noise and point down-sampling only; dynamics are
    deterministic.
    """

    def __init__(self, scene: Scene, rng=None, t_max: int = T_MAX, n_pts: int = N_PTS, sigma: float = SIGMA_OBS):
        self.scene = scene
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.t_max = t_max
        self.n_pts = n_pts
        self.sigma = sigma
        self.reset()

    def reset(self, pose: Optional[Pose] = None) -> Observation:
        self.pose = pose if pose is not None else self.scene.start_pose()
        self.t = 0
        self.history: list[Frame] = []
        self.done = False
        self.outcome = Outcome.ONGOING
        self._capture()
        self.observation = aggregate_observation(self.history, rng=self.rng, n_pts=self.n_pts)
        return self.observation

    def _capture(self):
        pts, mask = render_observation(self.scene, self.pose, self.rng, self.sigma)
        self.history.append(Frame(self.t, self.pose, pts, mask))

    @property
    def config(self) -> np.ndarray:
        return geo.planar_config(self.pose)

    def step(self, action: Pose) -> StepResult:
        if self.done:
            raise RuntimeError("episode finished")
        a = project_action(action)
        new_pose = geo.project_planar(geo.compose(a, self.pose))
        collided = swept_collision(self.scene, self.config, geo.planar_config(new_pose))
        self.pose = new_pose
        self.t += 1
        self._capture()
        self.observation = aggregate_observation(self.history, rng=self.rng, n_pts=self.n_pts)
        if collided:
            self.outcome, reward = Outcome.COLLISION, -1.0
        elif check_grasp_success(self.scene, self.pose):
            self.outcome, reward = Outcome.SUCCESS, 1.0
        elif self.t >= self.t_max:
            self.outcome, reward = Outcome.TIMEOUT, 0.0
        else:
            reward = 0.0
        self.done = self.outcome is not Outcome.ONGOING
        return StepResult(self.observation, reward, self.done, self.outcome)


# -- scene sampling --------------------------------------------------------


def _sample_start(rng, target, ws):
    (x0, x1), (y0, y1) = ws
    for _ in range(100):
        bearing = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(0.34, 0.42)
        p = target + dist * np.array([math.cos(bearing), math.sin(bearing)])
        if x0 + 0.06 <= p[0] <= x1 - 0.06 and y0 + 0.06 <= p[1] <= y1 - 0.06:
            yaw = math.atan2(target[1] - p[1], target[0] - p[0])
            return np.array([p[0], p[1], yaw])
    raise SceneError("could not place start")


def _sample_layout(rng, n_obstacles, ws):
    (x0, x1), (y0, y1) = ws
    target = rng.uniform(-0.12, 0.12, size=2)
    r_t = rng.uniform(0.015, 0.025)
    start = _sample_start(rng, target, ws)
    from .expert import BODY_INFLATION, body_center

    start_bc = body_center(start)
    centers, radii = [], []
    for _ in range(n_obstacles):
        for _attempt in range(200):
            r = rng.uniform(0.03, 0.08)
            d = rng.uniform(r_t + r + 0.04, 0.32)
            ang = rng.uniform(-math.pi, math.pi)
            c = target + d * np.array([math.cos(ang), math.sin(ang)])
            if not (x0 + r <= c[0] <= x1 - r and y0 + r <= c[1] <= y1 - r):
                continue
            if any(np.linalg.norm(c - c2) < r + r2 + 0.01 for c2, r2 in zip(centers, radii)):
                continue
            if np.linalg.norm(c - start_bc) < r + BODY_INFLATION + 0.01:
                continue
            centers.append(c)
            radii.append(r)
            break
        else:
            return None
    return Scene(target, r_t, np.array(centers).reshape(-1, 2), np.array(radii), start=start)


def sample_scene(seed: int, n_obstacles: int, max_attempts: int = 1000) -> Scene:
    """Rejection-sample a scene whose target is reachable by the expert."""
    if not 0 <= n_obstacles <= MAX_OBSTACLES:
        raise ValueError(f"n_obstacles must be in [0, {MAX_OBSTACLES}]")
    from .expert import is_feasible

    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        scene = _sample_layout(rng, n_obstacles, WORKSPACE)
        if scene is None:
            continue
        scene.seed = int(seed)
        if is_feasible(scene):
            return scene
    raise SceneError(f"no feasible scene after {max_attempts} attempts (seed={seed}, n={n_obstacles})")
