"""Static figures: metric bars, training curves, token usage and skeleton strips."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def metric_bars(metrics: dict, path):
    """Bar chart of ``{name: {"mean", "ci95"}}`` (or plain numbers)."""
    names = sorted(metrics)
    means = [metrics[n]["mean"] if isinstance(metrics[n], dict) else metrics[n] for n in names]
    errs = [metrics[n].get("ci95", 0.0) if isinstance(metrics[n], dict) else 0.0 for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names)), 3.5))
    ax.bar(range(len(names)), means, yerr=errs, capsize=3, color="#4a7fb0")
    ax.set_xticks(range(len(names)), names, rotation=40, ha="right", fontsize=8)
    ax.set_title("evaluation metrics (mean, 95% CI)")
    return _save(fig, path)


def loss_curves(log_path, path, keys=None):
    rows = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{log_path} holds no log records")
    keys = keys or [k for k, v in rows[0].items() if k not in ("step", "lr", "augmented", "task")
                    and isinstance(v, (int, float))]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in rows]
    for k in keys:
        vals = [max(r.get(k, np.nan), 1e-8) for r in rows]
        ax.plot(steps, vals, label=k)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    return _save(fig, path)


def token_histogram(tokens, codebook_size, path):
    counts = np.bincount(np.asarray(tokens, dtype=np.int64).ravel(), minlength=codebook_size)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(codebook_size), counts, width=1.0, color="#7a5195")
    used = int((counts > 0).sum())
    ax.set_title(f"token usage ({used}/{codebook_size} codes used)")
    ax.set_xlabel("code index")
    return _save(fig, path)


def trajectory_strip(positions, parents, path, frames=6):
    """Top-down root path plus side-view skeleton snapshots."""
    pos = np.asarray(positions)
    fig, (top, side) = plt.subplots(1, 2, figsize=(9, 3.5), gridspec_kw={"width_ratios": [1, 2.5]})
    top.plot(pos[:, 0, 0], pos[:, 0, 2], color="k")
    top.set_aspect("equal", adjustable="datalim")
    top.set_title("root path (x, z)")
    picks = np.linspace(0, len(pos) - 1, frames).astype(int)
    for n, t in enumerate(picks):
        shift = n * 0.8 - pos[t, 0, 2]
        for j, p in enumerate(parents):
            if p >= 0:
                side.plot([pos[t, p, 2] + shift, pos[t, j, 2] + shift], [pos[t, p, 1], pos[t, j, 1]],
                          color="#d45087", lw=1.5)
    side.axhline(0.0, color="grey", lw=0.8)
    side.set_aspect("equal", adjustable="datalim")
    side.set_title("side view snapshots")
    side.set_xticks([])
    return _save(fig, path)
