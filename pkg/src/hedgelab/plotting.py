"""Figure files for the report command (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_gap_surface(edges_m, edges_iv, mean_gap, path: str, title: str = "") -> None:
    """Heatmap of mean agent-minus-BS delta gap; excluded cells are left grey."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    data = np.ma.masked_invalid(np.asarray(mean_gap, float))
    lim = float(np.nanmax(np.abs(mean_gap))) if np.any(np.isfinite(mean_gap)) else 1.0
    cmap = plt.get_cmap("RdBu").copy()
    cmap.set_bad("0.85")
    x = np.arange(len(edges_iv))
    y = np.arange(len(edges_m))
    mesh = ax.pcolormesh(x, y, data, cmap=cmap, vmin=-lim, vmax=lim)
    ax.set_xticks(x, [f"{e:g}" for e in edges_iv], rotation=45)
    ax.set_yticks(y, [f"{e:g}" for e in edges_m])
    ax.set_xlabel("implied volatility")
    ax.set_ylabel("forward moneyness")
    ax.set_title(title or "mean agent - BS delta")
    fig.colorbar(mesh, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_comparisons(labels, points, lowers, uppers, metric: str, path: str) -> None:
    """Point estimates with 95% bootstrap intervals, one marker per row."""
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels) + 2), 3.5))
    pts, lo, hi = (np.asarray(v, float) for v in (points, lowers, uppers))
    x = np.arange(len(labels))
    ax.errorbar(x, pts, yerr=[pts - lo, hi - pts], fmt="o", capsize=4)
    ax.axhline(0.0, color="0.5", lw=0.8)
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
