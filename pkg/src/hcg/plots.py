"""Figures with CSV twins: loss/reward curves, success vs clutter, latent PCA scatter."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=90, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(rows, out_png, out_csv=None):
    """``rows`` of (epoch, split, loss_name, value); one line per (split, name)."""
    rows = [(int(e), str(s), str(n), float(v)) for e, s, n, v in rows]
    write_csv(out_csv or Path(out_png).with_suffix(".csv"), ["epoch", "split", "loss_name", "value"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in sorted({(s, n) for _, s, n, _ in rows}):
        pts = sorted((e, v) for e, s, n, v in rows if (s, n) == key)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=f"{key[0]}/{key[1]}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, out_png)


def plot_reward_curve(rows, out_png, out_csv=None, window: int = 20):
    """``rows`` of (episode, outcome, reward, t_switch); draws the running mean reward."""
    rows = [(int(e), str(o), float(r), "" if t is None or t == "" else int(t)) for e, o, r, t in rows]
    write_csv(out_csv or Path(out_png).with_suffix(".csv"), ["episode", "outcome", "reward", "t_switch"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        r = np.array([x[2] for x in rows])
        k = max(1, min(window, len(r)))
        smooth = np.convolve(r, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(len(smooth)) + k - 1, smooth)
    ax.set_xlabel("episode")
    ax.set_ylabel(f"reward (running mean, {window})")
    return _save(fig, out_png)


def plot_series(values, out_png, out_csv=None, name: str = "value"):
    values = [float(v) for v in values]
    write_csv(out_csv or Path(out_png).with_suffix(".csv"), ["index", name], list(enumerate(values)))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(range(len(values)), values)
    ax.set_ylabel(name)
    return _save(fig, out_png)


def plot_clutter_bars(levels, success, out_png, out_csv=None, lo=None, hi=None):
    """One bar per clutter level with optional min/max whiskers."""
    levels = [int(x) for x in levels]
    success = [float(s) for s in success]
    lo = [float(x) for x in lo] if lo is not None else success
    hi = [float(x) for x in hi] if hi is not None else success
    write_csv(out_csv or Path(out_png).with_suffix(".csv"), ["n_obstacles", "success_rate", "min", "max"],
              list(zip(levels, success, lo, hi)))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    err = np.array([[s - a for s, a in zip(success, lo)], [b - s for s, b in zip(success, hi)]])
    ax.bar([str(x) for x in levels], success, yerr=err, capsize=3, color="tab:blue")
    ax.set_xlabel("obstacles")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    return _save(fig, out_png)


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Projection onto the two leading principal axes, with signs fixed for reproducibility."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    out = xc @ comps.T
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((len(out), 2 - out.shape[1]))])
    return out


def plot_latent_scatter(latents, groups, out_png, out_csv=None):
    """PCA of plan embeddings, one color per trajectory (used in place of a t-SNE map)."""
    xy = pca_2d(latents)
    groups = [int(g) for g in groups]
    write_csv(out_csv or Path(out_png).with_suffix(".csv"), ["trajectory", "pc1", "pc2"],
              [(g, float(a), float(b)) for g, (a, b) in zip(groups, xy)])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xy[:, 0], xy[:, 1], c=groups, cmap="tab20", s=10)
    ax.set_title("plan embeddings (PCA substitute for t-SNE)", fontsize=9)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    return _save(fig, out_png)
