"""Evaluation reports, held-out scene sets, the ablation suite and episode logs."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import blockio, demos, hrl, offline, sim
from .hrl import HrlHyper
from .models import ModelBundle

log = logging.getLogger(__name__)

OUTCOMES = ("success", "collision", "timeout")
ABLATION_VARIANTS = ("bc", "zeros", "single-plan", "no-policy-loss", "hcg")
EVAL_TAG = 3_000_017  # keeps evaluation scenes apart from dataset scenes


@dataclass
class EvalReport:
    n_episodes: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_reward: float
    mean_steps: float
    per_clutter: dict = field(default_factory=dict)  # n_obstacles -> {n, success_rate, collision_rate, timeout_rate}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_clutter"] = {str(k): v for k, v in sorted(self.per_clutter.items())}
        return d


def _rates(outcomes) -> tuple:
    n = len(outcomes)
    if n == 0:
        return 0.0, 0.0, 0.0
    counts = [sum(1 for o in outcomes if o == k) for k in OUTCOMES]
    unknown = n - sum(counts)
    if unknown:
        raise ValueError(f"{unknown} outcomes outside {OUTCOMES}")
    s, c = counts[0] / n, counts[1] / n
    return s, c, 1.0 - s - c  # exact complement keeps the sum at 1


def build_report(outcomes: Sequence[str], steps: Optional[Sequence[int]] = None,
                 clutter: Optional[Sequence[int]] = None) -> EvalReport:
    """Aggregate terminal outcomes; the sparse reward makes mean reward = success - collision."""
    outcomes = [o.value if isinstance(o, sim.Outcome) else str(o) for o in outcomes]
    s, c, t = _rates(outcomes)
    per = {}
    if clutter is not None:
        for level in sorted(set(int(x) for x in clutter)):
            sub = [o for o, k in zip(outcomes, clutter) if int(k) == level]
            ps, pc, pt = _rates(sub)
            per[level] = {"n": len(sub), "success_rate": ps, "collision_rate": pc, "timeout_rate": pt}
    return EvalReport(
        n_episodes=len(outcomes),
        success_rate=s,
        collision_rate=c,
        timeout_rate=t,
        mean_reward=s - c,
        mean_steps=float(np.mean(steps)) if steps is not None and len(steps) else 0.0,
        per_clutter=per,
    )


# -- scene sets --------------------------------------------------------------------


def eval_scene_seed(seed: int, index: int, level: Optional[int] = None) -> int:
    key = [EVAL_TAG, seed, index] + ([] if level is None else [level])
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def make_scene_set(n: int, seed: int, obstacles_range=(3, 7), level: Optional[int] = None) -> list:
    """Deterministic held-out scenes; ``level`` fixes the obstacle count."""
    out = []
    lo, hi = obstacles_range
    for i in range(n):
        sd = eval_scene_seed(seed, i, level)
        k = level if level is not None else int(np.random.default_rng(sd).integers(lo, hi + 1))
        out.append(sim.sample_scene(sd, k))
    return out


def load_scene_dir(path) -> list:
    files = sorted(Path(path).glob("scene_*.json"))
    return [sim.Scene.from_dict(json.loads(f.read_text())) for f in files]


def save_scene_dir(scenes, path) -> list:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:05d}.json"
        (out / name).write_text(sc.to_json() + "\n")
        names.append(name)
    return names


# -- evaluation ------------------------------------------------------------------


def _episode_job(args):
    scene, bundle, hyper, seed, keep = args
    return hrl.execute_episode(scene, bundle, hyper, "eval", rng=np.random.default_rng(seed), keep_clouds=keep)


def run_episodes(bundle: ModelBundle, scenes, hyper: HrlHyper, seed: int = 0, workers: int = 1,
                 keep_clouds: bool = False) -> list:
    seeds = [int(np.random.SeedSequence([seed, 4_000_037, i]).generate_state(1)[0]) for i in range(len(scenes))]
    jobs = [(sc, bundle, hyper, sd, keep_clouds) for sc, sd in zip(scenes, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_episode_job, jobs, chunksize=4))
    return [_episode_job(j) for j in jobs]


def evaluate(bundle: ModelBundle, scenes, hyper: HrlHyper, seed: int = 0, workers: int = 1,
             records: Optional[list] = None) -> EvalReport:
    recs = run_episodes(bundle, scenes, hyper, seed, workers)
    if records is not None:
        records.extend(recs)
    return build_report([r.outcome for r in recs], [r.steps for r in recs], [sc.n_obstacles for sc in scenes])


def primitive_only_hyper() -> HrlHyper:
    return HrlHyper(fixed_switch=0)


# -- ablation --------------------------------------------------------------------


def variant_setup(variant: str, bundles: dict, base: HrlHyper):
    """``(bundle, hyper)`` used to evaluate one ablation variant."""
    if variant == "hcg":
        return bundles["hcg"], base
    if variant == "zeros":
        return bundles["hcg"], replace(base, zero_latent=True)
    if variant == "single-plan":
        return bundles["hcg"], replace(base, single_plan=True)
    if variant == "no-policy-loss":
        return bundles["no_policy_loss"], base
    if variant == "bc":
        return bundles["bc"], replace(base, zero_latent=True)
    raise ValueError(f"unknown variant {variant!r}")


TRAINED_FOR = {"hcg": "hcg", "zeros": "hcg", "single-plan": "hcg", "no-policy-loss": "no_policy_loss", "bc": "bc"}


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)  # (variant, seed, EvalReport)
    clutter: list = field(default_factory=list)  # (level, seed, EvalReport)
    bundles: dict = field(default_factory=dict)  # (train variant, seed) -> ModelBundle
    curves: dict = field(default_factory=dict)

    def summary(self, variant: str, key: str = "success_rate") -> dict:
        vals = [getattr(r, key) for v, _, r in self.rows if v == variant]
        return _mean_range(vals)

    def clutter_summary(self, level: int, key: str = "success_rate") -> dict:
        vals = [getattr(r, key) for lv, _, r in self.clutter if lv == level]
        return _mean_range(vals)


def _mean_range(vals) -> dict:
    if not vals:
        return {"mean": float("nan"), "min": float("nan"), "max": float("nan"), "n": 0}
    return {"mean": float(np.mean(vals)), "min": float(np.min(vals)), "max": float(np.max(vals)), "n": len(vals)}


def run_ablation(dataset, variants=ABLATION_VARIANTS, seeds=(0, 1, 2), n_scenes: int = 200,
                 obstacles_range=(3, 7), offline_cfg: Optional[offline.OfflineConfig] = None,
                 hyper: Optional[HrlHyper] = None, clutter_levels=(), clutter_scenes: int = 200,
                 eval_seed: int = 777, workers: int = 1, model_cfg=None, progress=None) -> AblationResult:
    """Train the needed bundles per seed and evaluate every variant on shared held-out scenes."""
    offline_cfg = offline_cfg or offline.OfflineConfig()
    hyper = hyper or HrlHyper(selection="mode", fixed_switch=30)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    need = sorted({TRAINED_FOR[v] for v in variants} | ({"hcg"} if clutter_levels else set()))
    scenes = make_scene_set(n_scenes, eval_seed, obstacles_range)
    result = AblationResult()
    for seed in seeds:
        bundles = {}
        for tv in need:
            cfg = replace(offline_cfg, variant=tv, seed=seed)
            res = offline.train_offline(dataset, ModelBundle(model_cfg, seed=seed), cfg)
            bundles[tv] = res.bundle
            result.bundles[(tv, seed)] = res.bundle
            result.curves[(tv, seed)] = res.curves
            if progress:
                progress(f"trained {tv} seed {seed}")
        for v in variants:
            b, h = variant_setup(v, bundles, hyper)
            rep = evaluate(b, scenes, h, seed=seed, workers=workers)
            result.rows.append((v, seed, rep))
            if progress:
                progress(f"{v} seed {seed}: success {rep.success_rate:.3f}")
        for level in clutter_levels:
            lv_scenes = make_scene_set(clutter_scenes, eval_seed, level=level)
            rep = evaluate(bundles["hcg"], lv_scenes, hyper, seed=seed, workers=workers)
            result.clutter.append((level, seed, rep))
            if progress:
                progress(f"clutter {level} seed {seed}: success {rep.success_rate:.3f}")
    return result


# -- episode logs ------------------------------------------------------------------

LOG_MAGIC = b"HCGEPIS1"


def write_episode_log(path, records, scenes=None) -> Path:
    """One JSON line per step; clouds go to a sibling binary block (float32, little-endian).

    Each step line references its cloud by ``{"file", "offset", "shape"}``
    where ``offset`` is in bytes from the start of the block payload.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_name = path.with_suffix(".bin").name
    arrays = OrderedDict()
    lines = []
    offset = 0
    for e, rec in enumerate(records):
        clouds = rec.clouds or []
        for t in range(rec.steps):
            entry = {
                "episode": e,
                "t": t,
                "config": rec.configs[t - 1] if t > 0 else rec.start_config,
                "controller": "primitive" if rec.t_switch is not None and t >= rec.t_switch else "policy",
                "done": t == rec.steps - 1,
                "outcome": rec.outcome if t == rec.steps - 1 else "ongoing",
                "reward": rec.reward if t == rec.steps - 1 else 0.0,
            }
            if scenes is not None:
                entry["scene_seed"] = scenes[e].seed
                entry["n_obstacles"] = scenes[e].n_obstacles
            if t < len(clouds):
                arr = np.asarray(clouds[t], dtype=np.float32)
                key = f"e{e:05d}_t{t:03d}"
                arrays[key] = arr
                entry["cloud"] = {"file": blob_name, "offset": offset, "shape": list(arr.shape)}
                offset += arr.size * 4
            lines.append(json.dumps(entry, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    if arrays:
        blockio.write_block(path.with_suffix(".bin"), LOG_MAGIC, {"log": path.name}, arrays)
    return path


def read_episode_log(path) -> list:
    """Per-episode dicts ``{outcome, reward, steps, n_obstacles}`` from a step log."""
    episodes = OrderedDict()
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        entry = json.loads(raw)
        ep = episodes.setdefault(entry["episode"], {"steps": 0, "outcome": "ongoing", "reward": 0.0,
                                                    "n_obstacles": entry.get("n_obstacles")})
        ep["steps"] = max(ep["steps"], entry["t"] + 1)
        if entry.get("done"):
            ep["outcome"] = entry["outcome"]
            ep["reward"] = entry["reward"]
    return list(episodes.values())


def load_log_cloud(log_path, entry: dict) -> np.ndarray:
    ref = entry["cloud"]
    blob = Path(log_path).parent / ref["file"]
    _, arrays = blockio.read_block(blob, LOG_MAGIC)
    flat = np.concatenate([a.reshape(-1) for a in arrays.values()])
    n = int(np.prod(ref["shape"]))
    start = ref["offset"] // 4
    return flat[start : start + n].reshape(ref["shape"])


def report_from_log(path) -> EvalReport:
    eps = read_episode_log(path)
    clutter = [e["n_obstacles"] for e in eps] if eps and all(e["n_obstacles"] is not None for e in eps) else None
    return build_report([e["outcome"] for e in eps], [e["steps"] for e in eps], clutter)


def save_transitions(path, transitions) -> Path:
    """Transitions in the demo block format with an ``episode_meta`` entry per row."""
    arrays = OrderedDict()
    rows = []
    for i, tr in enumerate(transitions):
        arrays[f"s_{i}"] = tr.s_t
        arrays[f"s_next_{i}"] = tr.s_next
        if tr.z_t is not None:
            arrays[f"z_{i}"] = tr.z_t
        rows.append({"t": tr.t, "r_t": tr.r_t, "done": tr.done,
                     "episode_meta": {"r_T": tr.meta.r_T, "T": tr.meta.T, "t_switch": tr.meta.t_switch}})
    blockio.write_block(path, blockio.DEMO_MAGIC, {"kind": "transitions", "rows": rows}, arrays)
    return Path(path)


def dataset_stats(dataset) -> dict:
    by_scene = {}
    for d in dataset:
        by_scene.setdefault(d.scene_index, set()).add(d.goal_id)
    return {
        "n_demos": len(dataset),
        "n_scenes": len(by_scene),
        "mean_goals_per_scene": float(np.mean([len(v) for v in by_scene.values()])) if by_scene else 0.0,
    }
