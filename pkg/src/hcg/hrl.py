"""On-policy stage: plan critic, option classifier, replay buffer and the hierarchical controller."""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import geometry as geo
from . import models, sim
from .geometry import Pose
from .models import ModelBundle
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.optim import Adam, AdamHyper

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
SELECTIONS = ("critic", "random", "mode")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class HrlHyper:
    lam: float = 0.5
    gamma: float = 0.95
    n_candidates: int = 8
    replan_interval: int = 12
    eps_start: float = 0.2
    eps_end: float = 0.05
    switch_threshold: float = 0.5
    switch_range: tuple = (sim.T_MAX // 3, sim.T_MAX)  # train-mode t_switch, inclusive
    fixed_switch: Optional[int] = None  # switch at this step instead of consulting G
    selection: str = "critic"  # critic | random | mode
    use_option: bool = True  # False: pi keeps control (unless fixed_switch)
    zero_latent: bool = False  # Zeros ablation
    single_plan: bool = False  # draw candidates once at t = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.n_candidates < 0 or self.replan_interval < 1:
            raise ValueError("bad candidate schedule")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        self.switch_range = tuple(self.switch_range)


@dataclass
class EpisodeMeta:
    r_T: float
    T: int
    t_switch: int


@dataclass
class Transition:
    s_t: np.ndarray  # (N, 7) network-ready features
    z_t: np.ndarray
    r_t: float
    s_next: np.ndarray
    done: bool
    t: int
    meta: EpisodeMeta
    next_candidates: Optional[np.ndarray] = None  # (K, z) plans available at s_next


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling; safe for concurrent push/sample."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self._head = 0
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._items)

    def push(self, item):
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(item)
            else:
                self._items[self._head] = item
                self._head = (self._head + 1) % self.capacity

    def extend(self, items):
        for it in items:
            self.push(it)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        with self._lock:
            if not self._items:
                raise IndexError("sample from an empty buffer")
            idx = rng.integers(0, len(self._items), size=n)
            return [self._items[i] for i in idx]

    def snapshot(self) -> list:
        """Items oldest first."""
        with self._lock:
            return self._items[self._head :] + self._items[: self._head]


# -- critic and option heads ---------------------------------------------------


def critic_forward(s: np.ndarray, z, critic: models.CriticOption) -> float:
    feat = critic.state_feature(np.asarray(s)[None])
    return float(critic.q(feat, np.asarray(z, dtype=np.float64)[None]).data[0])


def option_forward(s: np.ndarray, critic: models.CriticOption) -> float:
    feat = critic.state_feature(np.asarray(s)[None])
    return float(ad._sigmoid(critic.g_logit(feat).data)[0])


def score_plans(s: np.ndarray, candidates: np.ndarray, critic) -> np.ndarray:
    """Q(s, z_k) for every candidate; ``critic`` may also be a plain ``f(s, Z)`` callable."""
    if callable(critic) and not isinstance(critic, models.CriticOption):
        return np.asarray(critic(s, candidates), dtype=np.float64)
    feat = critic.state_feature(np.asarray(s)[None]).data
    feat = np.repeat(feat, len(candidates), axis=0)
    return critic.q(feat, np.asarray(candidates, dtype=np.float64)).data


def select_plan(s: np.ndarray, candidates, critic):
    """``(index, plan, score)`` of the highest-scoring candidate; ties go to the lowest index."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or len(candidates) == 0:
        raise ValueError("select_plan needs at least one candidate")
    scores = score_plans(s, candidates, critic)
    k = int(np.argmax(scores))
    return k, candidates[k], float(scores[k])


def bellman_target(tr: Transition, next_candidates, q_target, hyper: HrlHyper) -> float:
    """Mixed one-step / Monte-Carlo target.

    ``q_target(s, Z)`` returns scores for a batch of plans.  Terminal
    transitions use ``lam * r_t + (1 - lam) * r_T``.
    """
    lam, gamma = hyper.lam, hyper.gamma
    if tr.done:
        return lam * tr.r_t + (1.0 - lam) * tr.meta.r_T
    if next_candidates is None or len(next_candidates) == 0:
        raise ValueError("non-terminal transition needs at least one next candidate")
    best = float(np.max(q_target(tr.s_next, np.asarray(next_candidates, dtype=np.float64))))
    mc = gamma ** (tr.meta.T - tr.t) * tr.meta.r_T
    return lam * (tr.r_t + gamma * best) + (1.0 - lam) * mc


def critic_loss(q, y):
    """Squared error; works on floats and Tensors."""
    if isinstance(q, Tensor):
        return ad.square(q - y)
    return (float(q) - float(y)) ** 2


def option_loss(g_prob, r_T: float, t: int, t_switch: int):
    """Binary cross entropy against ``r_T == 1``, zero before the switch step."""
    if t < t_switch:
        return ad.Tensor(0.0) if isinstance(g_prob, Tensor) else 0.0
    label = 1.0 if r_T == 1 else 0.0
    if isinstance(g_prob, Tensor):
        p = ad.clip(g_prob, PROB_EPS, 1.0 - PROB_EPS)
        return -(label * ad.log(p) + (1.0 - label) * ad.log(1.0 - p))
    p = min(max(float(g_prob), PROB_EPS), 1.0 - PROB_EPS)
    return -(label * math.log(p) + (1.0 - label) * math.log(1.0 - p))


def option_loss_from_logits(logits: Tensor, labels, active) -> Tensor:
    """Masked mean BCE on logits with probabilities clamped to [eps, 1 - eps]."""
    p = ad.clip(ad.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    labels = np.asarray(labels, dtype=np.float64)
    bce = -(labels * ad.log(p) + (1.0 - labels) * ad.log(1.0 - p))
    return ad.tsum(bce * np.asarray(active, dtype=np.float64)) / max(len(labels), 1)


# -- grasp primitive -----------------------------------------------------------


def fit_circle(xy: np.ndarray):
    """Algebraic least-squares circle ``(center, radius)``; None when degenerate."""
    if len(xy) < 3:
        return None
    a = np.column_stack([2 * xy, np.ones(len(xy))])
    b = np.sum(xy * xy, axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    c = sol[:2]
    r2 = sol[2] + c @ c
    if not np.isfinite(r2) or r2 <= 0:
        return None
    return c, math.sqrt(r2)


def estimate_target(obs: sim.Observation, gripper: Pose):
    """Target center in the base frame from its observed boundary points."""
    pts = obs.points[obs.mask > 0.5]
    if len(pts) == 0:
        return None
    xy = geo.transform_points(geo.inverse(gripper), pts)[:, :2]
    fit = fit_circle(xy)
    if fit is not None and 0.005 <= fit[1] <= 0.05:
        return fit[0]
    # arc too short to fit: push the centroid away from the palm by a nominal radius
    eye = geo.planar_config(gripper)[:2]
    m = xy.mean(axis=0)
    d = m - eye
    n = np.linalg.norm(d)
    return m + 0.02 * d / n if n > 1e-9 else m


def grasp_primitive(obs: sim.Observation, gripper: Pose) -> Pose:
    """Greedy clamped step toward the grasp pose nearest the current approach bearing.

    Obstacles are ignored.  Returns the identity when the target is unseen or
    the gripper already sits at the estimated grasp pose.
    """
    center = estimate_target(obs, gripper)
    if center is None:
        return geo.identity()
    x, y, yaw = geo.planar_config(gripper)
    off = np.array([x, y]) - center
    alpha = math.atan2(off[1], off[0]) if np.linalg.norm(off) > 1e-9 else yaw + math.pi
    goal = np.array([center[0] + sim.GRASP_DEPTH * math.cos(alpha),
                     center[1] + sim.GRASP_DEPTH * math.sin(alpha),
                     geo.wrap_angle(alpha + math.pi)])
    dp = goal[:2] - np.array([x, y])
    dist = np.linalg.norm(dp)
    step = 0.95 * sim.MAX_STEP_TRANS
    if dist > step:
        dp *= step / dist
    dyaw = float(np.clip(geo.wrap_angle(goal[2] - yaw), -sim.MAX_STEP_YAW, sim.MAX_STEP_YAW))
    if np.linalg.norm(dp) < 1e-12 and abs(dyaw) < 1e-12:
        return geo.identity()
    nxt = geo.planar_pose(x + dp[0], y + dp[1], yaw + dyaw)
    return geo.compose(nxt, geo.inverse(gripper))


# -- episodes ------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    outcome: str
    reward: float
    steps: int
    t_switch: Optional[int]  # step at which the primitive took over (None: never)
    transitions: list = field(default_factory=list)
    plan_choices: list = field(default_factory=list)  # (t, candidate index, score)
    sampler_calls: int = 0
    configs: list = field(default_factory=list)  # palm config after each step
    start_config: list = field(default_factory=list)
    clouds: list = field(default_factory=list)  # network input per step when kept

    def summary(self) -> dict:
        return {
            "outcome": self.outcome,
            "reward": self.reward,
            "steps": self.steps,
            "t_switch": self.t_switch,
            "sampler_calls": self.sampler_calls,
            "plan_choices": [[int(t), int(k), float(s)] for t, k, s in self.plan_choices],
        }


def draw_candidates(s: np.ndarray, phi: models.PlanSampler, n: int, rng) -> np.ndarray:
    """The mode plan (c = 0) followed by ``n`` prior samples."""
    codes = np.vstack([np.zeros((1, phi.c_dim)), rng.standard_normal((n, phi.c_dim))])
    return models.prior_sample_plans(s, phi, codes)


def _epsilon(hyper: HrlHyper, progress: float) -> float:
    progress = min(max(progress, 0.0), 1.0)
    return hyper.eps_start + (hyper.eps_end - hyper.eps_start) * progress


def execute_episode(scene: sim.Scene, bundle: ModelBundle, hyper: HrlHyper, mode: str = "eval",
                    rng=None, progress: float = 0.0, record_transitions: Optional[bool] = None,
                    t_max: int = sim.T_MAX, keep_clouds: bool = False) -> EpisodeRecord:
    """Run the hierarchical controller for one episode.

    In ``train`` mode plans are chosen epsilon-greedily and control passes to
    the grasp primitive at a random ``t_switch``; in ``eval`` mode the option
    classifier decides (or ``hyper.fixed_switch`` when set).
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    record_transitions = mode == "train" if record_transitions is None else record_transitions
    env = sim.GraspSim(scene, rng=rng, t_max=t_max)
    m = bundle.cfg.points
    eps = _epsilon(hyper, progress) if mode == "train" else 0.0
    if mode == "train":
        lo, hi = hyper.switch_range
        t_switch_planned = int(rng.integers(lo, hi + 1))
    else:
        t_switch_planned = hyper.fixed_switch

    rec = EpisodeRecord(outcome=sim.Outcome.ONGOING.value, reward=0.0, steps=0, t_switch=None,
                        start_config=env.config.tolist())
    switched = False
    z = None
    candidates = None
    steps = []  # (s, z, r, done, t, candidates available at s)
    s = models.prepare_obs(env.observation, m, rng)
    t = 0
    while True:
        active_candidates = None
        if not switched:
            if t_switch_planned is not None and t >= t_switch_planned:
                switched = True
            elif mode == "eval" and t_switch_planned is None and hyper.use_option:
                if option_forward(s, bundle.critic) > hyper.switch_threshold:
                    switched = True
            if switched:
                rec.t_switch = t
        if not switched:
            replan = z is None or (not hyper.single_plan and t % hyper.replan_interval == 0)
            if replan:
                if hyper.zero_latent:
                    candidates = np.zeros((1, bundle.cfg.z_dim))
                    k, score = 0, 0.0
                else:
                    candidates = draw_candidates(s, bundle.phi, hyper.n_candidates, rng)
                    rec.sampler_calls += len(candidates)
                    if hyper.selection == "mode":
                        k, score = 0, float("nan")
                    elif hyper.selection == "random" or (mode == "train" and rng.random() < eps):
                        k, score = int(rng.integers(len(candidates))), float("nan")
                    else:
                        k, _, score = select_plan(s, candidates, bundle.critic)
                z = candidates[k]
                rec.plan_choices.append((t, k, score))
                active_candidates = candidates
            action, _ = models.policy_forward(sim.Observation(s[:, :3], s[:, 6], s[0, 3:6]), z, bundle.pi)
        else:
            action = grasp_primitive(env.observation, env.pose)
        steps.append([s, z, 0.0, False, t, active_candidates])
        if keep_clouds:
            rec.clouds.append(s.astype(np.float32))
        res = env.step(action)
        rec.configs.append(env.config.tolist())
        steps[-1][2] = res.reward
        steps[-1][3] = res.done
        t += 1
        s = models.prepare_obs(res.observation, m, rng)
        if res.done:
            rec.outcome = res.outcome.value
            rec.reward = res.reward
            break
    rec.steps = t
    if record_transitions:
        T = t - 1
        meta = EpisodeMeta(r_T=rec.reward, T=T,
                           t_switch=rec.t_switch if rec.t_switch is not None else t_switch_planned or t)
        s32 = [st[0].astype(np.float32) for st in steps] + [s.astype(np.float32)]
        for i, (_, zi, r, done, ti, _) in enumerate(steps):
            nxt = None
            if not done:
                # the plan set the controller can actually choose from at s_{t+1}
                nxt_c = steps[i + 1][5]
                nxt = (nxt_c if nxt_c is not None else
                       (zi[None] if zi is not None else None))
            rec.transitions.append(Transition(
                s_t=s32[i], z_t=None if zi is None else zi.astype(np.float32), r_t=r, s_next=s32[i + 1],
                done=done, t=ti, meta=meta,
                next_candidates=None if nxt is None else np.asarray(nxt, dtype=np.float32),
            ))
    return rec


# -- online training -------------------------------------------------------------


@dataclass
class OnlineConfig:
    episodes: int = 300
    batch_size: int = 64
    updates_per_episode: int = 8
    lr: float = 1e-3
    target_sync: int = 100
    buffer_capacity: int = 50_000
    seed: int = 0
    obstacles_range: tuple = (3, 7)
    clip_norm: Optional[float] = 10.0
    warmup_transitions: int = 256


@dataclass
class OnlineResult:
    bundle: ModelBundle
    reward_curve: list = field(default_factory=list)  # (episode, outcome, reward, t_switch)
    loss_curve: list = field(default_factory=list)  # (update, critic, option)
    frozen_checksums: dict = field(default_factory=dict)


def batch_targets(batch: Sequence[Transition], q_target: models.CriticOption, hyper: HrlHyper) -> np.ndarray:
    """Vectorised :func:`bellman_target` over a batch."""
    ys = np.empty(len(batch))
    s_rows, z_rows, owner = [], [], []
    for i, tr in enumerate(batch):
        if tr.done or tr.next_candidates is None:
            continue
        k = len(tr.next_candidates)
        s_rows.append(np.broadcast_to(tr.s_next, (k,) + tr.s_next.shape))
        z_rows.append(tr.next_candidates)
        owner.extend([i] * k)
    best = np.full(len(batch), -np.inf)
    if s_rows:
        feat = q_target.state_feature(np.concatenate(s_rows).astype(np.float64)).data
        q = q_target.q(feat, np.concatenate(z_rows).astype(np.float64)).data
        np.maximum.at(best, np.asarray(owner), q)
    for i, tr in enumerate(batch):
        if tr.done or tr.next_candidates is None:
            ys[i] = hyper.lam * tr.r_t + (1.0 - hyper.lam) * tr.meta.r_T
        else:
            mc = hyper.gamma ** (tr.meta.T - tr.t) * tr.meta.r_T
            ys[i] = hyper.lam * (tr.r_t + hyper.gamma * best[i]) + (1.0 - hyper.lam) * mc
    return ys


def update_step(critic: models.CriticOption, q_target: models.CriticOption, batch, hyper: HrlHyper, opt: Adam,
                clip_norm: Optional[float] = 10.0):
    """One gradient step on the critic term (pre-switch steps) plus the option term (post-switch)."""
    y = batch_targets(batch, q_target, hyper)
    s = np.stack([tr.s_t for tr in batch]).astype(np.float64)
    has_z = np.array([tr.z_t is not None and tr.t < tr.meta.t_switch for tr in batch], dtype=np.float64)
    z = np.stack([tr.z_t if tr.z_t is not None else np.zeros(critic.q_head.sizes[0] - critic.enc.out_dim)
                  for tr in batch]).astype(np.float64)
    labels = np.array([1.0 if tr.meta.r_T == 1 else 0.0 for tr in batch])
    active = np.array([1.0 if tr.t >= tr.meta.t_switch else 0.0 for tr in batch])
    opt.zero_grad()
    feat = critic.state_feature(s)
    q = critic.q(feat, z)
    lc = ad.tsum(ad.square(q - y) * has_z) / max(len(batch), 1)
    lo = option_loss_from_logits(critic.g_logit(feat), labels, active)
    total = lc + lo
    if not math.isfinite(float(total.data)):
        raise TrainingDivergence(f"online loss became {float(total.data)}")
    total.backward()
    opt.step(clip_norm)
    return float(lc.data), float(lo.data)


def train_online(bundle: ModelBundle, hyper: Optional[HrlHyper] = None, cfg: Optional[OnlineConfig] = None,
                 scene_factory: Optional[Callable[[int], sim.Scene]] = None, progress=None,
                 actors: int = 1) -> OnlineResult:
    """Fit Q and G on freshly sampled scenes; theta, pi and phi stay fixed.

    ``actors > 1`` collects episodes in worker processes from parameter
    snapshots taken between rounds, which gives up bitwise reproducibility.
    """
    hyper = hyper or HrlHyper()
    cfg = cfg or OnlineConfig()
    rng = np.random.default_rng(cfg.seed)
    frozen = {k: v for k, v in bundle.checksums().items() if k != "critic"}
    target = bundle.copy().critic
    opt = Adam([bundle.critic], AdamHyper(lr=cfg.lr))
    buf = ReplayBuffer(cfg.buffer_capacity)
    result = OnlineResult(bundle, frozen_checksums=frozen)
    n_updates = 0
    lo, hi = cfg.obstacles_range

    def make_scene(ep):
        if scene_factory is not None:
            return scene_factory(ep)
        seed = int(np.random.SeedSequence([cfg.seed, 1_000_003, ep]).generate_state(1)[0])
        n_obs = int(np.random.default_rng(seed).integers(lo, hi + 1))
        return sim.sample_scene(seed, n_obs)

    def episode_seed(ep):
        return int(np.random.SeedSequence([cfg.seed, 2_000_003, ep]).generate_state(1)[0])

    ep = 0
    pool = None
    if actors > 1:
        from concurrent.futures import ProcessPoolExecutor

        pool = ProcessPoolExecutor(actors)
    try:
        while ep < cfg.episodes:
            round_eps = list(range(ep, min(ep + max(actors, 1), cfg.episodes)))
            jobs = [(make_scene(e), episode_seed(e), e / max(cfg.episodes - 1, 1)) for e in round_eps]
            if pool is not None:
                snap = bundle.copy()
                recs = list(pool.map(_train_episode_job, [(snap, hyper, *j) for j in jobs]))
            else:
                recs = [execute_episode(sc, bundle, hyper, "train", rng=np.random.default_rng(sd), progress=p)
                        for sc, sd, p in jobs]
            for e, rec in zip(round_eps, recs):
                buf.extend(rec.transitions)
                result.reward_curve.append((e, rec.outcome, rec.reward, rec.t_switch))
                if len(buf) >= min(cfg.warmup_transitions, cfg.batch_size):
                    for _ in range(cfg.updates_per_episode):
                        batch = buf.sample(cfg.batch_size, rng)
                        lc, lo_ = update_step(bundle.critic, target, batch, hyper, opt, cfg.clip_norm)
                        n_updates += 1
                        result.loss_curve.append((n_updates, lc, lo_))
                        if n_updates % cfg.target_sync == 0:
                            target.load_state_dict(bundle.critic.state_dict())
                if progress:
                    progress(e, result)
            ep = round_eps[-1] + 1
    finally:
        if pool is not None:
            pool.shutdown()
    after = {k: v for k, v in bundle.checksums().items() if k != "critic"}
    if after != frozen:
        raise RuntimeError("frozen networks changed during online training")
    return result


def _train_episode_job(args):
    bundle, hyper, scene, seed, prog = args
    return execute_episode(scene, bundle, hyper, "train", rng=np.random.default_rng(seed), progress=prog)
