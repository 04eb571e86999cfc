"""Offline training of the embedding network, policy and plan sampler from demonstrations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import models
from .models import ModelBundle
from .nn import autodiff as ad
from .nn.optim import Adam, AdamHyper

log = logging.getLogger(__name__)

VARIANTS = ("hcg", "bc", "no_policy_loss")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class OfflineConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    heldout_fraction: float = 0.1
    variant: str = "hcg"  # hcg | bc | no_policy_loss
    clip_norm: Optional[float] = 10.0
    eval_every: int = 1


@dataclass
class OfflineResult:
    bundle: ModelBundle
    curves: list = field(default_factory=list)  # (epoch, split, loss_name, value)
    train_idx: list = field(default_factory=list)
    heldout_idx: list = field(default_factory=list)

    def curve(self, split: str, name: str) -> list:
        return [v for e, s, n, v in self.curves if s == split and n == name]


def split_by_scene(demos, fraction: float, rng) -> tuple[list, list]:
    scenes = sorted({d.scene_index for d in demos})
    n_hold = int(round(fraction * len(scenes))) if len(scenes) > 1 else 0
    hold = set(rng.choice(scenes, size=n_hold, replace=False).tolist()) if n_hold else set()
    train = [i for i, d in enumerate(demos) if d.scene_index not in hold]
    held = [i for i, d in enumerate(demos) if d.scene_index in hold]
    return train, held


def _check(value: float, what: str):
    if not math.isfinite(value):
        raise TrainingDivergence(f"{what} became {value}")


def evaluate_losses(bundle: ModelBundle, demos, samples, batch_size: int = 32, noise_seed: int = 0) -> dict:
    """Mean held-out losses over fixed ``[(demo_idx, t)]`` samples."""
    tot = {"traj_theta": 0.0, "traj_zeros": 0.0, "sampler": 0.0}
    n = 0
    rng = np.random.default_rng(noise_seed)
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        batch = models.make_batch([(demos[i], t) for i, t in chunk], bundle.cfg.points, None)
        b = batch.size
        z = bundle.theta(batch.plan_local, batch.plan_global).data
        tot["traj_theta"] += models.traj_loss_batch(bundle.pi, batch, z).data * b
        tot["traj_zeros"] += models.traj_loss_batch(bundle.pi, batch, np.zeros_like(z)).data * b
        noise = rng.standard_normal((b, bundle.cfg.c_dim))
        s, _ = models.sampler_loss_batch(bundle.phi, bundle.pi, batch, z, noise)
        tot["sampler"] += s.data * b
        n += b
    return {k: float(v) / max(n, 1) for k, v in tot.items()}


def train_offline(demos, bundle: Optional[ModelBundle] = None, cfg: Optional[OfflineConfig] = None,
                  checkpoint_dir=None, progress=None) -> OfflineResult:
    """Alternate the encode-plan step (pi, theta) and the generate-plan step (phi).

    ``variant="bc"`` trains pi with a zero latent only; ``"no_policy_loss"``
    drops the trajectory term from the sampler loss.
    """
    cfg = cfg or OfflineConfig()
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    if not demos:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    bundle = bundle or ModelBundle(seed=cfg.seed)
    train_idx, held_idx = split_by_scene(demos, cfg.heldout_fraction, rng)
    if not train_idx:
        train_idx, held_idx = list(range(len(demos))), []
    eval_rng = np.random.default_rng(cfg.seed + 7919)
    held_samples = [(i, int(eval_rng.integers(0, demos[i].n_steps))) for i in held_idx]

    hyper = AdamHyper(lr=cfg.lr)
    opt_main = Adam([bundle.pi] if cfg.variant == "bc" else [bundle.pi, bundle.theta], hyper)
    opt_phi = Adam([bundle.phi], hyper)
    result = OfflineResult(bundle, [], train_idx, held_idx)
    z_dim = bundle.cfg.z_dim

    def record(epoch):
        if held_samples:
            for name, v in evaluate_losses(bundle, demos, held_samples).items():
                result.curves.append((epoch, "heldout", name, v))

    record(0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        sums = {"traj_theta": 0.0, "sampler": 0.0}
        n_batches = 0
        for k in range(0, len(order), cfg.batch_size):
            chunk = order[k : k + cfg.batch_size]
            samples = [(demos[i], int(rng.integers(0, demos[i].n_steps))) for i in chunk]
            batch = models.make_batch(samples, bundle.cfg.points, rng, with_plan=cfg.variant != "bc")

            # encode plan: optimize pi, theta on L_traj(z_theta, pi)
            opt_main.zero_grad()
            if cfg.variant == "bc":
                z = np.zeros((batch.size, z_dim))
            else:
                z = bundle.theta(batch.plan_local, batch.plan_global)
            lt = models.traj_loss_batch(bundle.pi, batch, z)
            _check(float(lt.data), "L_traj")
            lt.backward()
            opt_main.step(cfg.clip_norm)
            sums["traj_theta"] += float(lt.data)

            # generate plan: optimize phi on L_sampler with z_theta as a fixed target
            if cfg.variant != "bc":
                opt_phi.zero_grad()
                noise = rng.standard_normal((batch.size, bundle.cfg.c_dim))
                with bundle.pi.frozen():
                    ls, _ = models.sampler_loss_batch(
                        bundle.phi, bundle.pi, batch, ad.as_tensor(z).data, noise,
                        policy_loss=cfg.variant != "no_policy_loss",
                    )
                    _check(float(ls.data), "L_sampler")
                    ls.backward()
                opt_phi.step(cfg.clip_norm)
                sums["sampler"] += float(ls.data)
            n_batches += 1
        for name, v in sums.items():
            result.curves.append((epoch, "train", name, v / max(n_batches, 1)))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record(epoch)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            bundle.save(Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt", {"epoch": epoch, "variant": cfg.variant})
        if progress:
            progress(epoch, result)
        log.info("epoch %d %s", epoch, {n: round(v / max(n_batches, 1), 5) for n, v in sums.items()})
    bundle.meta["variant"] = cfg.variant
    return result
