"""Figures written next to the CSV reports (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_latency_trace(rows, path, L_win_star: float | None = None) -> Path:
    """Per-chunk step size, history size and latency components."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.0, 4.5), sharex=True)
        tick = [r.tick for r in rows]
        ax1.plot(tick, [r.step for r in rows], label="step (events)")
        ax1.plot(tick, [r.hist for r in rows], label="history", alpha=0.7)
        ax1.set_ylabel("events")
        ax1.set_yscale("log")
        ax1.legend(loc="upper right")
        ax2.plot(tick, [r.record.L_s * 1e3 for r in rows], label="$L_s$")
        ax2.plot(tick, [r.record.L_i * 1e3 for r in rows], label="$L_i$")
        ax2.plot(tick, [r.record.L * 1e3 for r in rows], label="$L$", color="k", lw=0.8)
        if L_win_star is not None:
            ax2.axhline(L_win_star * 1e3, ls="--", color="grey", lw=0.8, label="$L_{win}^*$")
        ax2.set_xlabel("tick")
        ax2.set_ylabel("latency (ms)")
        ax2.legend(loc="upper right")
        return _save(fig, path)


def plot_latency_decomposition(stats, path) -> Path:
    """Stacked mean window/inference latency per mode (averaged over repetitions)."""
    modes = sorted({s.mode for s in stats})
    ls = [np.mean([s.L_s[0] for s in stats if s.mode == m]) * 1e3 for m in modes]
    li = [np.mean([s.L_i[0] for s in stats if s.mode == m]) * 1e3 for m in modes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.bar(modes, ls, label="window $L_s$")
        ax.bar(modes, li, bottom=ls, label="inference $L_i$")
        for i, (a, b) in enumerate(zip(ls, li)):
            ax.annotate(f"{a + b:.2f} ms", (i, a + b), ha="center", va="bottom")
        ax.set_ylabel("mean latency (ms)")
        ax.set_yscale("symlog", linthresh=1.0)
        ax.legend()
        return _save(fig, path)


def plot_loss_curve(losses, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(np.arange(len(losses)), losses)
        ax.set_xlabel("iteration")
        ax.set_ylabel("focal loss")
        return _save(fig, path)
