"""Command-line entry point: ``hcg <subcommand>``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, blockio, demos, harness, hrl, models, offline, plots
from . import config as cfgmod
from .config import ConfigError, RunConfig

log = logging.getLogger("hcg")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


def code_version() -> str:
    """Package version plus a digest of the source tree."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def out_root(args, cfg: RunConfig) -> Path:
    env = os.environ.get("HCG_OUT")
    if env:
        return Path(env)
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(cfg.out_dir)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, argv, seeds: dict, outputs=(), inputs=(),
                   parallel: bool = False, extra: Optional[dict] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfgmod.dump_config(cfg))
    files = {}
    for p in sorted(set(Path(o) for o in outputs)):
        if p.is_file():
            files[p.relative_to(out_dir).as_posix() if p.is_relative_to(out_dir) else str(p)] = _sha(p)
    man = {
        "command": command,
        "argv": list(argv),
        "config_hash": cfg.hash(),
        "code_version": code_version(),
        "seeds": seeds,
        "parallel": parallel,
        "bitwise_reproducible": not parallel,
        "inputs": [str(i) for i in inputs],
        "outputs": files,
    }
    if extra:
        man.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return path


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing input artifact: {p}")
    return p


def _range(text: str) -> tuple:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_scenes(args, cfg: RunConfig, argv):
    sc = cfg.scenes
    n = args.n if args.n is not None else sc.n_scenes
    seed = args.seed if args.seed is not None else sc.seed
    rng_range = _range(args.obstacles) if args.obstacles else tuple(sc.obstacles_range)
    cfg.scenes = replace(sc, n_scenes=n, seed=seed, obstacles_range=rng_range)
    out = out_root(args, cfg) / "scenes"
    scenes = harness.make_scene_set(n, seed, rng_range)
    names = harness.save_scene_dir(scenes, out)
    write_manifest(out, "gen-scenes", cfg, argv, {"scenes": seed}, [out / n_ for n_ in names])
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_gen_demos(args, cfg: RunConfig, argv):
    dc = cfg.dataset
    dc = replace(
        dc,
        n_scenes=args.scenes if args.scenes is not None else dc.n_scenes,
        goals_per_scene=args.goals if args.goals is not None else dc.goals_per_scene,
        seed=args.seed if args.seed is not None else dc.seed,
        obstacles_range=_range(args.obstacles) if args.obstacles else tuple(dc.obstacles_range),
    )
    cfg.dataset = dc
    out = out_root(args, cfg) / "demos"
    ds = demos.generate_dataset(dc, workers=args.workers)
    stats = harness.dataset_stats(ds)
    demos.save_dataset(ds, out, dc, extra={
        "command": "gen-demos", "argv": list(argv), "config_hash": cfg.hash(), "code_version": code_version(),
        "seeds": {"dataset": dc.seed}, **stats,
    })
    (out / "config.json").write_text(cfgmod.dump_config(cfg))
    print(f"wrote {stats['n_demos']} demonstrations from {stats['n_scenes']} scenes to {out}")


def _load_dataset(path):
    p = _need(path)
    return demos.load_dataset(p)


def cmd_train_offline(args, cfg: RunConfig, argv):
    ds = _load_dataset(args.demos)
    oc = cfg.offline
    oc = replace(oc, variant=args.variant or oc.variant, epochs=args.epochs if args.epochs is not None else oc.epochs,
                 seed=args.seed if args.seed is not None else oc.seed)
    cfg.offline = oc
    out = out_root(args, cfg) / "offline" / oc.variant
    bundle = models.ModelBundle(cfg.model, seed=oc.seed)
    res = offline.train_offline(ds, bundle, oc, checkpoint_dir=out / "checkpoints" if args.keep_epochs else None)
    ckpt = out / "model.ckpt"
    res.bundle.save(ckpt, {"variant": oc.variant, "epochs": oc.epochs})
    curves = plots.write_csv(out / "loss_curves.csv", ["epoch", "split", "loss_name", "value"], res.curves)
    outputs = [ckpt, curves] + sorted((out / "checkpoints").glob("*.ckpt")) if args.keep_epochs else [ckpt, curves]
    write_manifest(out, "train-offline", cfg, argv, {"offline": oc.seed}, outputs, [args.demos])
    th = res.curve("heldout", "traj_theta")
    if th:
        print(f"held-out L_traj(z_theta): {th[0]:.4f} -> {th[-1]:.4f}")
    print(f"checkpoint: {ckpt}")


def _hyper(cfg: RunConfig, selection=None, fixed_switch="keep") -> hrl.HrlHyper:
    h = cfg.hrl
    if selection is not None:
        h = replace(h, selection=selection)
    if fixed_switch != "keep":
        h = replace(h, fixed_switch=fixed_switch)
    return h


def _load_bundle(path) -> models.ModelBundle:
    return models.ModelBundle.load(_need(path))


def cmd_train_online(args, cfg: RunConfig, argv):
    bundle = _load_bundle(args.checkpoint)
    oc = cfg.online
    oc = replace(oc, episodes=args.episodes if args.episodes is not None else oc.episodes,
                 seed=args.seed if args.seed is not None else oc.seed)
    cfg.online = oc
    out = out_root(args, cfg) / "online"
    actors = args.parallel_actors or 1
    res = hrl.train_online(bundle, cfg.hrl, oc, actors=actors)
    ckpt = out / "model.ckpt"
    res.bundle.save(ckpt, {"online_episodes": oc.episodes})
    rc = plots.write_csv(out / "reward_curves.csv", ["episode", "outcome", "reward", "t_switch"],
                         [(e, o, r, "" if t is None else t) for e, o, r, t in res.reward_curve])
    lc = plots.write_csv(out / "online_losses.csv", ["update", "critic", "option"], res.loss_curve)
    write_manifest(out, "train-online", cfg, argv, {"online": oc.seed}, [ckpt, rc, lc], [args.checkpoint],
                   parallel=actors > 1, extra={"frozen_checksums": res.frozen_checksums})
    rewards = [r for _, _, r, _ in res.reward_curve]
    print(f"{len(rewards)} episodes, mean reward {np.mean(rewards) if rewards else 0.0:.3f}; checkpoint: {ckpt}")


def cmd_eval(args, cfg: RunConfig, argv):
    ec = cfg.eval
    out = out_root(args, cfg) / "eval"
    if args.log:
        rep = harness.report_from_log(_need(args.log))
        out.mkdir(parents=True, exist_ok=True)
        rp = out / "report.json"
        rp.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
        write_manifest(out, "eval", cfg, argv, {}, [rp], [args.log])
        print(json.dumps(rep.to_dict(), sort_keys=True))
        return
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint or --log", field="checkpoint")
    bundle = _load_bundle(args.checkpoint)
    ec = replace(ec, n_scenes=args.n_scenes if args.n_scenes is not None else ec.n_scenes,
                 seed=args.seed if args.seed is not None else ec.seed,
                 selection=args.selection or ec.selection,
                 fixed_switch=args.fixed_switch if args.fixed_switch is not None else ec.fixed_switch,
                 obstacles_range=_range(args.obstacles) if args.obstacles else tuple(ec.obstacles_range))
    cfg.eval = ec
    if args.scenes:
        scenes = harness.load_scene_dir(_need(args.scenes))
        if not scenes:
            raise MissingArtifact(f"no scene_*.json files in {args.scenes}")
    else:
        scenes = harness.make_scene_set(ec.n_scenes, ec.seed, ec.obstacles_range)
    hyper = _hyper(cfg, ec.selection, ec.fixed_switch)
    records = harness.run_episodes(bundle, scenes, hyper, ec.seed, args.workers or ec.workers,
                                   keep_clouds=args.save_clouds)
    rep = harness.build_report([r.outcome for r in records], [r.steps for r in records],
                               [s.n_obstacles for s in scenes])
    out.mkdir(parents=True, exist_ok=True)
    rp = out / "report.json"
    rp.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    logp = harness.write_episode_log(out / "episodes.jsonl", records, scenes)
    oc = plots.write_csv(out / "outcomes.csv", ["episode", "scene_seed", "n_obstacles", "outcome", "reward", "steps",
                                                "t_switch"],
                         [(i, s.seed, s.n_obstacles, r.outcome, r.reward, r.steps, "" if r.t_switch is None else r.t_switch)
                          for i, (s, r) in enumerate(zip(scenes, records))])
    outputs = [rp, logp, oc] + ([logp.with_suffix(".bin")] if args.save_clouds else [])
    write_manifest(out, "eval", cfg, argv, {"eval": ec.seed}, outputs, [args.checkpoint])
    print(json.dumps(rep.to_dict(), sort_keys=True))


def cmd_ablate(args, cfg: RunConfig, argv):
    ds = _load_dataset(args.demos)
    ac = cfg.ablation
    variants = tuple(v.strip() for v in args.variants.split(",")) if args.variants else tuple(ac.variants)
    for v in variants:
        if v not in harness.ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant '{v}'", field="variants")
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else tuple(ac.seeds)
    ac = replace(ac, variants=variants, seeds=seeds,
                 n_scenes=args.n_scenes if args.n_scenes is not None else ac.n_scenes,
                 clutter_scenes=args.clutter_scenes if args.clutter_scenes is not None else ac.clutter_scenes)
    cfg.ablation = ac
    out = out_root(args, cfg) / "ablate"
    hyper = _hyper(cfg, ac.selection, ac.fixed_switch)
    res = harness.run_ablation(ds, variants, seeds, ac.n_scenes, ac.obstacles_range, cfg.offline, hyper,
                               ac.clutter_levels, ac.clutter_scenes, ac.eval_seed, args.workers or 1, cfg.model,
                               progress=lambda m: log.info(m))
    outputs = write_ablation(out, res, variants, ac.clutter_levels)
    write_manifest(out, "ablate", cfg, argv, {"ablation": list(seeds), "eval": ac.eval_seed}, outputs, [args.demos])
    for v in variants:
        s = res.summary(v)
        print(f"{v:16s} success {s['mean']:.3f} [{s['min']:.3f}, {s['max']:.3f}]")
    for lv in ac.clutter_levels:
        s = res.clutter_summary(lv)
        print(f"clutter {lv}        success {s['mean']:.3f} [{s['min']:.3f}, {s['max']:.3f}]")


def write_ablation(out: Path, res: harness.AblationResult, variants, levels) -> list:
    out.mkdir(parents=True, exist_ok=True)
    cols = ["seed", "n_episodes", "success_rate", "collision_rate", "timeout_rate", "mean_reward", "mean_steps"]

    def row(key, seed, r):
        return [key, seed, r.n_episodes, r.success_rate, r.collision_rate, r.timeout_rate, r.mean_reward, r.mean_steps]

    a = plots.write_csv(out / "ablation.csv", ["variant"] + cols, [row(v, s, r) for v, s, r in res.rows])
    c = plots.write_csv(out / "clutter.csv", ["n_obstacles"] + cols, [row(lv, s, r) for lv, s, r in res.clutter])
    summary = {
        "variants": {v: {k: res.summary(v, k) for k in ("success_rate", "collision_rate", "mean_reward")}
                     for v in variants},
        "clutter": {str(lv): res.clutter_summary(lv) for lv in levels},
    }
    sp = out / "report.json"
    sp.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return [a, c, sp]


def cmd_plot(args, cfg: RunConfig, argv):
    src = _need(args.input)
    out = out_root(args, cfg) / "plots"
    outputs = []
    found = False
    for lc in sorted(src.rglob("loss_curves.csv")):
        rows = [(r["epoch"], r["split"], r["loss_name"], r["value"]) for r in plots.read_csv(lc)]
        tag = lc.parent.name
        outputs += [plots.plot_loss_curves(rows, out / f"loss_{tag}.png")]
        found = True
    for rc in sorted(src.rglob("reward_curves.csv")):
        rows = [(r["episode"], r["outcome"], r["reward"], r["t_switch"]) for r in plots.read_csv(rc)]
        outputs += [plots.plot_reward_curve(rows, out / "reward_curve.png")]
        found = True
    for cc in sorted(src.rglob("clutter.csv")):
        rows = plots.read_csv(cc)
        levels = sorted({int(r["n_obstacles"]) for r in rows})
        vals = [[float(r["success_rate"]) for r in rows if int(r["n_obstacles"]) == lv] for lv in levels]
        if levels:
            outputs += [plots.plot_clutter_bars(levels, [np.mean(v) for v in vals], out / "clutter_bars.png",
                                                lo=[min(v) for v in vals], hi=[max(v) for v in vals])]
            found = True
    if args.checkpoint and args.demos:
        bundle = _load_bundle(args.checkpoint)
        ds = _load_dataset(args.demos)[: args.latent_demos]
        z, g = latent_points(bundle, ds)
        outputs += [plots.plot_latent_scatter(z, g, out / "latent_pca.png")]
        found = True
    if not found:
        raise MissingArtifact(f"nothing to plot under {src}")
    outputs += [p.with_suffix(".csv") for p in outputs]
    write_manifest(out, "plot", cfg, argv, {}, outputs, [args.input])
    print(f"wrote {len(outputs) // 2} plots to {out}")


def latent_points(bundle: models.ModelBundle, dataset, stride: int = 3):
    """z_theta at every ``stride``-th step of each demonstration, labelled by demo index."""
    zs, groups = [], []
    for i, d in enumerate(dataset):
        for t in range(0, d.n_steps, stride):
            zs.append(models.encode_plan(d.observation(t), d.plan[t:], bundle.theta))
            groups.append(i)
    return np.array(zs), groups


def cmd_inspect(args, cfg: RunConfig, argv):
    p = _need(args.path)
    if p.is_dir():
        p = _need(p / "manifest.json")
    head = p.read_bytes()[:8]
    if head == blockio.CKPT_MAGIC:
        arrays, meta = blockio.load_checkpoint(p)
        info = {"kind": "checkpoint", "meta": meta, "tensors": {k: list(v.shape) for k, v in arrays.items()},
                "n_params": int(sum(v.size for v in arrays.values()))}
    elif head in (blockio.DEMO_MAGIC, harness.LOG_MAGIC):
        header, arrays = blockio.read_block(p, head)
        header.pop("tensors", None)
        info = {"kind": head.decode(), "keys": sorted(header), "arrays": {k: list(v.shape) for k, v in arrays.items()}}
        if "n_steps" in header:
            info["n_steps"] = header["n_steps"]
            info["outcome"] = header.get("outcome")
    else:
        try:
            info = {"kind": "json", "content": json.loads(p.read_text())}
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise blockio.FormatError(f"{p}: unrecognised artifact")
    print(json.dumps(info, indent=1, sort_keys=True, default=str))


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hcg", description="Hierarchical latent-plan grasping in planar clutter.")
    ap.add_argument("--version", action="version", version=f"hcg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output root (HCG_OUT takes precedence)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gen-scenes", help="sample scene JSON files"))
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--obstacles", help="range such as 3-7")
    p.set_defaults(func=cmd_gen_scenes)

    p = common(sub.add_parser("gen-demos", help="generate expert demonstrations"))
    p.add_argument("--scenes", type=int)
    p.add_argument("--goals", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--obstacles", help="range such as 3-5")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_demos)

    p = common(sub.add_parser("train-offline", help="train theta, pi and phi from demonstrations"))
    p.add_argument("--demos", required=True, help="dataset directory or manifest")
    p.add_argument("--variant", choices=offline.VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--keep-epochs", action="store_true", help="also save a checkpoint per epoch")
    p.set_defaults(func=cmd_train_offline)

    p = common(sub.add_parser("train-online", help="fit the plan critic and option classifier"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel-actors", type=int, default=0,
                   help="collect episodes in N processes (not bitwise reproducible)")
    p.set_defaults(func=cmd_train_online)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint or summarise an episode log"))
    p.add_argument("--checkpoint")
    p.add_argument("--log", help="existing episodes.jsonl to summarise")
    p.add_argument("--scenes", help="directory of scene_*.json")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--obstacles")
    p.add_argument("--seed", type=int)
    p.add_argument("--selection", choices=hrl.SELECTIONS)
    p.add_argument("--fixed-switch", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--save-clouds", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="run the ablation variants and the clutter sweep"))
    p.add_argument("--demos", required=True)
    p.add_argument("--variants", help="comma list from " + ",".join(harness.ABLATION_VARIANTS))
    p.add_argument("--seeds", help="comma list")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--clutter-scenes", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("plot", help="render figures (with CSV twins) from a run directory"))
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", help="for the latent scatter")
    p.add_argument("--demos", help="for the latent scatter")
    p.add_argument("--latent-demos", type=int, default=12)
    p.set_defaults(func=cmd_plot)

    p = common(sub.add_parser("inspect", help="describe an artifact"))
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config and not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = cfgmod.load_config(args.config) if args.config else RunConfig()
        args.func(args, cfg, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError, blockio.FormatError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (offline.TrainingDivergence, hrl.TrainingDivergence) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
