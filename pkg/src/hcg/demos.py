"""Demonstration records, dataset generation and the HCGDEMO1 on-disk format."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import blockio, expert, sim
from . import geometry as geo
from .geometry import Pose

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class DatasetConfig:
    n_scenes: int = 100
    obstacles_range: tuple = (3, 7)
    goals_per_scene: int = 2
    seed: int = 0
    points: int = 64  # stored points per observation


@dataclass
class Demonstration:
    scene: sim.Scene
    plan: list  # list[Pose]
    goal_id: int
    approach_angle: float
    clouds: np.ndarray  # (T, M, 4): gripper-frame xyz + mask
    configs: np.ndarray  # (T, 3)
    actions: list  # list[Pose], length T
    goals: list  # list[Pose], length T
    scene_index: int = 0
    outcome: str = "success"

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    def observation(self, t: int) -> sim.Observation:
        c = self.clouds[t]
        return sim.Observation(c[:, :3].copy(), c[:, 3].copy(), self.configs[t].copy())

    def features(self, t: int) -> np.ndarray:
        return self.observation(t).features()


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def rollout_plan(scene: sim.Scene, plan, rng, points: int, sigma: float = sim.SIGMA_OBS):
    """Replay a plan open-loop, recording subsampled observations."""
    env = sim.GraspSim(scene, rng=rng, sigma=sigma)
    env.reset(plan[0])
    clouds, configs, actions, goals = [], [], [], []
    result = None
    for t in range(len(plan) - 1):
        obs = sim.subsample_points(env.observation, points, rng)
        clouds.append(np.hstack([obs.points, obs.mask[:, None]]))
        configs.append(obs.config)
        a = geo.extract_expert_action(plan, t)
        actions.append(a)
        goals.append(geo.extract_expert_goal(plan, t))
        result = env.step(a)
        if result.done:
            break
    outcome = result.outcome if result is not None else sim.Outcome.ONGOING
    return np.array(clouds), np.array(configs), actions, goals, outcome


def generate_scene_demos(cfg: DatasetConfig, index: int) -> tuple[list, list]:
    """Demonstrations for one scene; ``skipped`` lists (index, reason)."""
    seed = scene_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.obstacles_range
    n_obs = int(rng.integers(lo, hi + 1))
    try:
        scene = sim.sample_scene(seed, n_obs)
    except sim.SceneError as e:
        log.warning("scene %d skipped: %s", index, e)
        return [], [(index, str(e))]
    solved = expert.plan_all_goals(scene)
    if not solved:
        return [], [(index, "no reachable goal")]
    pick = rng.choice(len(solved), size=min(cfg.goals_per_scene, len(solved)), replace=False)
    demos, skipped = [], []
    for k in sorted(int(i) for i in pick):
        goal, plan = solved[k]
        clouds, configs, actions, goals, outcome = rollout_plan(scene, plan, rng, cfg.points)
        if outcome is not sim.Outcome.SUCCESS or len(actions) != len(plan) - 1:
            skipped.append((index, f"goal {goal.goal_id} replay ended in {outcome.value}"))
            continue
        demos.append(
            Demonstration(
                scene=scene,
                plan=plan,
                goal_id=goal.goal_id,
                approach_angle=goal.approach_angle,
                clouds=clouds.astype(np.float32).astype(np.float64),
                configs=configs.astype(np.float32).astype(np.float64),
                actions=actions,
                goals=goals,
                scene_index=index,
                outcome=outcome.value,
            )
        )
    return demos, skipped


def _scene_job(args):
    return generate_scene_demos(*args)


def generate_dataset(cfg: DatasetConfig, workers: int = 1) -> list[Demonstration]:
    jobs = [(cfg, i) for i in range(cfg.n_scenes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_scene_job, jobs))
    else:
        results = [_scene_job(j) for j in jobs]
    demos = []
    for d, skipped in results:  # merged in scene order
        demos.extend(d)
        for idx, why in skipped:
            log.info("skipped scene %d: %s", idx, why)
    return demos


# -- persistence -----------------------------------------------------------


def _demo_header(d: Demonstration) -> dict:
    return {
        "version": FORMAT_VERSION,
        "scene": d.scene.to_dict(),
        "scene_index": d.scene_index,
        "goal_id": d.goal_id,
        "approach_angle": d.approach_angle,
        "outcome": d.outcome,
        "plan": [p.to_list() for p in d.plan],
        "actions": [a.to_list() for a in d.actions],
        "goals": [g.to_list() for g in d.goals],
        "n_steps": d.n_steps,
    }


def save_dataset(demos, out_dir, cfg: Optional[DatasetConfig] = None, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    (out / "demos").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, d in enumerate(demos):
        rel = f"demos/demo_{i:05d}.bin"
        arrays = OrderedDict([("clouds", d.clouds), ("configs", d.configs)])
        blockio.write_block(out / rel, blockio.DEMO_MAGIC, _demo_header(d), arrays)
        digest = hashlib.sha256((out / rel).read_bytes()).hexdigest()
        entries.append({"file": rel, "scene_index": d.scene_index, "goal_id": d.goal_id, "sha256": digest})
    manifest = {
        "magic": blockio.DEMO_MAGIC.decode(),
        "version": FORMAT_VERSION,
        "config": None if cfg is None else {**cfg.__dict__, "obstacles_range": list(cfg.obstacles_range)},
        "n_demos": len(demos),
        "demos": entries,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_demo(path) -> Demonstration:
    header, arrays = blockio.read_block(path, blockio.DEMO_MAGIC)
    return Demonstration(
        scene=sim.Scene.from_dict(header["scene"]),
        plan=[Pose.from_list(v) for v in header["plan"]],
        goal_id=header["goal_id"],
        approach_angle=header["approach_angle"],
        clouds=arrays["clouds"],
        configs=arrays["configs"],
        actions=[Pose.from_list(v) for v in header["actions"]],
        goals=[Pose.from_list(v) for v in header["goals"]],
        scene_index=header.get("scene_index", 0),
        outcome=header.get("outcome", "success"),
    )


def load_dataset(path) -> list[Demonstration]:
    p = Path(path)
    manifest_path = p / "manifest.json" if p.is_dir() else p
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("magic") != blockio.DEMO_MAGIC.decode():
        raise blockio.FormatError(f"{manifest_path}: not a demo manifest")
    root = manifest_path.parent
    return [load_demo(root / e["file"]) for e in manifest["demos"]]
