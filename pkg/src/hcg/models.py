"""Plan embedding, plan-conditioned policy, cVAE plan sampler, critic/option networks and their losses."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import blockio
from . import geometry as geo
from . import sim
from .geometry import Pose
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import MLP, Module, SetEncoder

Z_DIM = 64
C_DIM = 2
OBS_FEATURES = 7
PLAN_FEATURES = 8
BETA_KL = 0.02


@dataclass
class ModelConfig:
    points: int = 64
    point_hidden: int = 64
    feat: int = 128
    hidden: int = 128
    z_dim: int = Z_DIM
    c_dim: int = C_DIM
    max_waypoints: int = 30


# -- inputs -----------------------------------------------------------------


def obs_features(obs: sim.Observation) -> np.ndarray:
    return obs.features()


def plan_to_cloud_sequence(obs: sim.Observation, plan: Sequence[Pose]):
    """Waypoint clouds ``(W, N, 7)`` and the time-stamped union ``(W * N, 8)``.

    Each waypoint cloud re-expresses the current points in that waypoint's
    gripper frame and carries the waypoint configuration.  The time channel is
    ``i / (W - 1)`` (0 for a single-waypoint plan).
    """
    if len(plan) == 0:
        raise ValueError("empty plan")
    w = len(plan)
    n = len(obs.mask)
    local = np.empty((w, n, OBS_FEATURES))
    for i, T in enumerate(plan):
        rel = geo.relative(plan[0], T)
        local[i, :, :3] = geo.transform_points(rel, obs.points)
        local[i, :, 3:6] = geo.planar_config(T)
        local[i, :, 6] = obs.mask
    times = np.arange(w) / max(w - 1, 1)
    glob = np.concatenate([local, np.broadcast_to(times[:, None, None], (w, n, 1))], axis=2)
    return local, glob.reshape(w * n, PLAN_FEATURES)


def pad_plan_clouds(local: np.ndarray, glob: np.ndarray, w_max: int):
    """Pad to ``w_max`` waypoints by repeating the last one (max-pool neutral)."""
    w, n, _ = local.shape
    if w > w_max:
        raise ValueError(f"plan longer than {w_max} waypoints")
    if w == w_max:
        return local, glob
    reps = np.concatenate([np.arange(w), np.full(w_max - w, w - 1)])
    g = glob.reshape(w, n, PLAN_FEATURES)[reps]
    return local[reps], g.reshape(w_max * n, PLAN_FEATURES)


# -- pose outputs -----------------------------------------------------------

_XG = geo.GRIPPER_POINTS
_CROSS = np.hstack([geo.skew(x) for x in _XG])  # (3, 3 * |Xg|)


def pose_points(trans: Tensor, omega: Tensor) -> Tensor:
    """Gripper points (K, |Xg|, 3) under poses given as translation + axis-angle."""
    k = omega.shape[0]
    n = len(_XG)
    s = ad.tsum(ad.square(omega), axis=-1, keepdims=True)  # (K, 1)
    a = ad.rodrigues_a(s).reshape(k, 1, 1)
    b = ad.rodrigues_b(s).reshape(k, 1, 1)
    cross = ad.matmul(omega, _CROSS).reshape(k, n, 3)
    dots = ad.matmul(omega, _XG.T).reshape(k, n, 1)  # w . x
    wwx = omega.reshape(k, 1, 3) * dots - _XG[None] * s.reshape(k, 1, 1)
    return _XG[None] + a * cross + b * wwx + trans.reshape(k, 1, 3)


def target_points(poses: Sequence[Pose]) -> np.ndarray:
    return np.stack([geo.transform_points(p, _XG) for p in poses])


def pose_l1(pred_points: Tensor, target: np.ndarray) -> Tensor:
    """Per-row point-matching loss (K,)."""
    return ad.mean(ad.tsum(ad.absolute(pred_points - target), axis=-1), axis=-1)


def decode_pose(vec6: np.ndarray) -> Pose:
    return geo.pose_from_vectors(vec6[:3], vec6[3:6])


# -- networks ---------------------------------------------------------------


class PlanEncoder(Module):
    """theta: plan cloud sequence -> z."""

    def __init__(self, cfg: ModelConfig, rng):
        self.local_enc = SetEncoder([OBS_FEATURES, cfg.point_hidden, cfg.feat], rng)
        self.global_enc = SetEncoder([PLAN_FEATURES, cfg.point_hidden, cfg.feat], rng)
        self.head = MLP([2 * cfg.feat, cfg.hidden, cfg.z_dim], rng)

    def __call__(self, local, glob) -> Tensor:
        """``local`` (B, W, N, 7), ``glob`` (B, W*N, 8) -> (B, z)."""
        f_local = ad.tmax(self.local_enc(local), axis=1)  # max over waypoints
        f_global = self.global_enc(glob)
        return self.head(ad.concat([f_local, f_global], axis=-1))


class Policy(Module):
    """pi: (observation, z) -> 12 numbers (action t, w; goal t, w)."""

    def __init__(self, cfg: ModelConfig, rng):
        self.enc = SetEncoder([OBS_FEATURES, cfg.point_hidden, cfg.feat], rng)
        self.head = MLP([cfg.feat + cfg.z_dim, cfg.hidden, cfg.hidden, 12], rng)

    def __call__(self, obs, z) -> Tensor:
        return self.head(ad.concat([self.enc(obs), z], axis=-1))


class PlanSampler(Module):
    """phi: conditional VAE over plan embeddings, conditioned on the observation."""

    def __init__(self, cfg: ModelConfig, rng):
        self.c_dim = cfg.c_dim
        self.enc = SetEncoder([OBS_FEATURES, cfg.point_hidden, cfg.feat], rng)
        self.encoder = MLP([cfg.feat + cfg.z_dim, cfg.hidden, 2 * cfg.c_dim], rng)
        self.decoder = MLP([cfg.feat + cfg.c_dim, cfg.hidden, cfg.z_dim], rng)

    def state_feature(self, obs) -> Tensor:
        return self.enc(obs)

    def encode(self, feat, z):
        out = self.encoder(ad.concat([feat, z], axis=-1))
        return out[:, : self.c_dim], out[:, self.c_dim :]

    def decode(self, feat, c) -> Tensor:
        return self.decoder(ad.concat([feat, c], axis=-1))


class CriticOption(Module):
    """Q(s, z) and G(s) on a shared point encoder."""

    def __init__(self, cfg: ModelConfig, rng):
        self.enc = SetEncoder([OBS_FEATURES, cfg.point_hidden, cfg.feat], rng)
        self.q_head = MLP([cfg.feat + cfg.z_dim, cfg.hidden, 1], rng)
        self.g_head = MLP([cfg.feat, cfg.hidden, 1], rng)

    def state_feature(self, obs) -> Tensor:
        return self.enc(obs)

    def q(self, feat, z) -> Tensor:
        return self.q_head(ad.concat([feat, z], axis=-1)).reshape(-1)

    def g_logit(self, feat) -> Tensor:
        return self.g_head(feat).reshape(-1)


class ModelBundle:
    NETS = ("theta", "pi", "phi", "critic")

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.theta = PlanEncoder(self.cfg, rng)
        self.pi = Policy(self.cfg, rng)
        self.phi = PlanSampler(self.cfg, rng)
        self.critic = CriticOption(self.cfg, rng)
        self.meta: dict = {}

    def nets(self):
        return {k: getattr(self, k) for k in self.NETS}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k, net in self.nets().items():
            for name, arr in net.state_dict().items():
                out[f"{k}.{name}"] = arr
        return out

    def load_state_dict(self, state):
        for k, net in self.nets().items():
            prefix = k + "."
            net.load_state_dict({n[len(prefix) :]: v for n, v in state.items() if n.startswith(prefix)})

    def checksums(self) -> dict:
        return {k: net.checksum() for k, net in self.nets().items()}

    def copy(self) -> "ModelBundle":
        other = ModelBundle(self.cfg)
        other.load_state_dict(self.state_dict())
        other.meta = dict(self.meta)
        return other

    def save(self, path, meta: Optional[dict] = None):
        m = {"model_config": asdict(self.cfg), **self.meta, **(meta or {})}
        blockio.save_checkpoint(path, self.state_dict(), m)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arrays, meta = blockio.load_checkpoint(path)
        b = cls(ModelConfig(**meta.get("model_config", {})))
        b.load_state_dict(arrays)
        b.meta = {k: v for k, v in meta.items() if k != "model_config"}
        return b


# -- single-sample operations -------------------------------------------------


def prepare_obs(obs: sim.Observation, points: int, rng=None) -> np.ndarray:
    """Network input (points, 7) for an observation of any size."""
    if rng is None:
        rng = np.random.default_rng(0)
    return sim.subsample_points(obs, points, rng).features() if len(obs) != points else obs.features()


def encode_plan(obs: sim.Observation, plan: Sequence[Pose], theta: PlanEncoder) -> np.ndarray:
    local, glob = plan_to_cloud_sequence(obs, plan)
    return theta(local[None], glob[None]).data[0]


def policy_forward(obs: sim.Observation, z, pi: Policy):
    """``(action, goal)`` relative poses for one observation and latent plan."""
    out = pi(obs.features()[None], np.asarray(z, dtype=np.float64)[None]).data[0]
    return decode_pose(out[:6]), decode_pose(out[6:])


def kl_loss(mu, log_var):
    """KL(N(mu, diag exp(log_var)) || N(0, I)), summed over dimensions."""
    mu, log_var = ad.as_tensor(mu), ad.as_tensor(log_var)
    terms = ad.square(mu) + ad.exp(log_var) - log_var - 1.0
    return ad.mul(ad.tsum(terms, axis=-1), 0.5)


def reparam_sample(mu, log_var, noise):
    mu, log_var = ad.as_tensor(mu), ad.as_tensor(log_var)
    return mu + ad.exp(ad.mul(log_var, 0.5)) * noise


def vae_encode(obs: sim.Observation, z, phi: PlanSampler):
    feat = phi.state_feature(obs.features()[None])
    mu, lv = phi.encode(feat, np.asarray(z, dtype=np.float64)[None])
    return mu.data[0], lv.data[0]


def vae_decode(obs: sim.Observation, c, phi: PlanSampler) -> np.ndarray:
    feat = phi.state_feature(obs.features()[None])
    return phi.decode(feat, np.asarray(c, dtype=np.float64)[None]).data[0]


def prior_sample_plans(obs_feat: np.ndarray, phi: PlanSampler, codes: np.ndarray) -> np.ndarray:
    """Decode a batch of VAE codes (K, c) for one observation -> (K, z)."""
    feat = phi.state_feature(obs_feat[None]).data
    feat = np.repeat(feat, len(codes), axis=0)
    return phi.decode(feat, codes).data


def prior_sample_plan(obs: sim.Observation, phi: PlanSampler, rng: np.random.Generator) -> np.ndarray:
    c = rng.standard_normal((1, phi.c_dim))
    return prior_sample_plans(obs.features(), phi, c)[0]


# -- batched losses -------------------------------------------------------------


@dataclass
class TrajBatch:
    """Rollout segments flattened over steps.

    ``obs`` (K, N, 7) step observations, ``owner`` (K,) sample index of each
    step, ``weight`` (K,) = 1 / (steps in its sample) / B, targets (K, |Xg|, 3).
    """

    obs: np.ndarray
    owner: np.ndarray
    weight: np.ndarray
    action_targets: np.ndarray
    goal_targets: np.ndarray
    start_obs: np.ndarray  # (B, N, 7)
    plan_local: np.ndarray  # (B, W, N, 7)
    plan_global: np.ndarray  # (B, W*N, 8)

    @property
    def size(self) -> int:
        return len(self.start_obs)


def traj_loss_batch(pi: Policy, batch: TrajBatch, z) -> Tensor:
    """Mean over samples of (1/T) sum_i [L_pose(g_i, g*_i) + L_pose(a_i, a*_i)]."""
    z = ad.as_tensor(z)
    z_steps = ad.getitem(z, batch.owner)
    out = pi(batch.obs, z_steps)
    a_pts = pose_points(out[:, 0:3], out[:, 3:6])
    g_pts = pose_points(out[:, 6:9], out[:, 9:12])
    per_step = pose_l1(g_pts, batch.goal_targets) + pose_l1(a_pts, batch.action_targets)
    return ad.tsum(per_step * batch.weight)


def traj_loss(demo, z, pi: Policy, start: int = 0) -> float:
    """Trajectory loss of one demonstration from step ``start`` with a fixed latent."""
    batch = make_batch([(demo, start)], points=None, rng=None, with_plan=False)
    return float(traj_loss_batch(pi, batch, np.asarray(z, dtype=np.float64)[None]).data)


def sampler_loss_batch(phi: PlanSampler, pi: Policy, batch: TrajBatch, z_theta: np.ndarray, noise: np.ndarray,
                       policy_loss: bool = True):
    """beta * KL + ||z_theta - z_phi||^2 + L_traj(z_phi, pi); returns (total, parts)."""
    feat = phi.state_feature(batch.start_obs)
    mu, lv = phi.encode(feat, z_theta)
    c = reparam_sample(mu, lv, noise)
    z_phi = phi.decode(feat, c)
    kl = ad.mean(kl_loss(mu, lv))
    recon = ad.mean(ad.tsum(ad.square(z_phi - z_theta), axis=-1))
    total = ad.mul(kl, BETA_KL) + recon
    parts = {"kl": kl, "recons": recon}
    if policy_loss:
        lt = traj_loss_batch(pi, batch, z_phi)
        total = total + lt
        parts["traj_phi"] = lt
    return total, parts


def make_batch(samples, points: Optional[int], rng, with_plan: bool = True, w_max: int = 30) -> TrajBatch:
    """Assemble ``[(demo, start_step)]`` into a :class:`TrajBatch`."""
    obs, owner, weight, act_t, goal_t = [], [], [], [], []
    start_obs, p_local, p_global = [], [], []
    b = len(samples)
    for j, (d, t0) in enumerate(samples):
        n = d.n_steps - t0
        feats = np.stack([d.features(t) for t in range(t0, d.n_steps)])
        if points is not None and feats.shape[1] != points:
            raise ValueError(f"demo stores {feats.shape[1]} points, model expects {points}")
        obs.append(feats)
        owner.append(np.full(n, j))
        weight.append(np.full(n, 1.0 / (n * b)))
        act_t.append(target_points(d.actions[t0:]))
        goal_t.append(target_points(d.goals[t0:]))
        start_obs.append(feats[0])
        if with_plan:
            local, glob = plan_to_cloud_sequence(d.observation(t0), d.plan[t0:])
            local, glob = pad_plan_clouds(local, glob, w_max)
            p_local.append(local)
            p_global.append(glob)
    return TrajBatch(
        obs=np.concatenate(obs),
        owner=np.concatenate(owner),
        weight=np.concatenate(weight),
        action_targets=np.concatenate(act_t),
        goal_targets=np.concatenate(goal_t),
        start_obs=np.stack(start_obs),
        plan_local=np.stack(p_local) if with_plan else None,
        plan_global=np.stack(p_global) if with_plan else None,
    )
