"""Report figures rendered straight to files with the Agg backend."""

from __future__ import annotations

import math

import numpy as np
from matplotlib.figure import Figure

from placeid.dataset import revisit_mask
from placeid.evaluation.metrics import NEG_RADIUS, POS_RADIUS, REVISIT_DT, _confusion, _top1_arrays


def _save(fig: Figure, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return str(path)


def plot_timing(report, path):
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    grid = np.linspace(0, max(report.sizes) * 1.05, 200)
    for m in report.methods:
        n = [t.n_ref for t in m.timings]
        mean = np.array([t.mean_s for t in m.timings]) * 1e3
        std = np.array([t.std_s for t in m.timings]) * 1e3
        line = ax.errorbar(n, mean, yerr=std, marker="o", ls="none", capsize=3, label=m.name)
        ax.plot(grid, m.fit.predict(grid) * 1e3, ls="--", lw=1, color=line[0].get_color())
    cx = report.crossover_n
    if cx is not None and 0 < cx <= grid[-1]:
        ax.axvline(cx, color="grey", lw=0.8, ls=":", label=f"crossover N={cx:,.0f}")
    ax.set_xlabel("reference scenes N")
    ax.set_ylabel("time per query (ms)")
    ax.legend(frameon=False)
    return _save(fig, path)


def f1_curve(records, dataset, pos_radius=POS_RADIUS, neg_radius=NEG_RADIUS, dt=REVISIT_DT):
    """(thresholds, f1) at every observed top-1 score, ascending."""
    revisit = revisit_mask(dataset, pos_radius, dt)
    scores, err, rev = _top1_arrays(records, dataset, revisit)
    th = np.unique(scores[np.isfinite(scores)])
    f1 = np.array([_confusion(scores, err, rev, t, pos_radius, neg_radius).f1 for t in th])
    return th, f1


def plot_f1(curves: dict, path):
    """``curves`` maps a method name to ``(thresholds, f1)``; thresholds are rank-normalised per method."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for name, (th, f1) in curves.items():
        x = np.linspace(0, 1, len(th)) if len(th) > 1 else np.zeros(len(th))
        best = f"{f1.max():.3f}" if len(f1) else "n/a"
        ax.plot(x, f1, marker=".", label=f"{name} (F1max {best})")
    ax.set_xlabel("threshold quantile over observed top-1 scores")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training(log, path):
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    epochs = [e.epoch for e in log]
    ax.plot(epochs, [e.train_loss for e in log], color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="C0")
    val = [(e.epoch, e.val_hits_at_1) for e in log if e.val_hits_at_1 is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), color="C1", marker=".")
        ax2.set_ylabel("val Hits@1", color="C1")
        ax2.set_ylim(0, 1.02)
    finite = [e.train_loss for e in log if math.isfinite(e.train_loss)]
    if finite and min(finite) > 0:
        ax.set_yscale("log")
    return _save(fig, path)
