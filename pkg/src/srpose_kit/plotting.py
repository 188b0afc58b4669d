"""Figures written next to the CSV outputs of the CLI (matplotlib, file-only backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def training_curves(rows, path):
    """Loss and validation medians per epoch."""
    ep = [r["epoch"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(ep, [r["mean_loss"] for r in rows], marker="o", ms=3)
    a.set_xlabel("epoch")
    a.set_ylabel("mean training loss")
    rot = [r["val_rot_med_deg"] for r in rows]
    if np.isfinite(rot).any():
        b.plot(ep, rot, marker="o", ms=3, label="rotation")
        b.plot(ep, [r["val_trans_med"] for r in rows], marker="s", ms=3, label="translation angle")
        b.legend()
    b.set_xlabel("epoch")
    b.set_ylabel("validation median error (deg)")
    _save(fig, path)


def error_cdf(errors_by_name: dict, path, max_deg: float = 30.0):
    """Cumulative precision of pose error; the AUC is the area under each curve."""
    fig, ax = plt.subplots(figsize=(5, 3.8))
    x = np.linspace(0.0, max_deg, 300)
    for name, errs in errors_by_name.items():
        e = np.sort(np.asarray(errs, float))
        e = e[np.isfinite(e)]
        if e.size:
            ax.plot(x, np.searchsorted(e, x, side="right") / e.size, label=name)
    ax.set_xlabel("pose error threshold (deg)")
    ax.set_ylabel("fraction of pairs")
    ax.set_ylim(0, 1)
    ax.legend()
    _save(fig, path)


def stage_timing(rows, stages, path):
    """Stacked bars of per-stage median time (ms), one bar per pipeline and size."""
    labels = [f"{r['pipeline']}\n{r['keypoints']}" for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(rows) + 2), 4))
    bottom = np.zeros(len(rows))
    for s in stages:
        vals = np.array([r.get(s, 0.0) for r in rows], float)
        ax.bar(labels, vals, bottom=bottom, label=s)
        bottom += vals
    ax.set_ylabel("median time (ms)")
    ax.legend()
    _save(fig, path)


def bar_compare(values: dict, ylabel: str, path):
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(values) + 1), 3.5))
    ax.bar(list(values), list(values.values()))
    ax.set_ylabel(ylabel)
    _save(fig, path)
