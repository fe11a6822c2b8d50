"""Figures for run directories, rendered off-screen."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_series(rows, metric: str, path, group_key: str = "group", ylabel: str | None = None) -> Path:
    """Mean and min-max band per group over step; ``rows`` are dicts with group, seed, step, value."""
    by_group = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_group[r[group_key]][int(r["step"])].append(float(r["value"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for g in sorted(by_group):
        steps = np.array(sorted(by_group[g]))
        vals = [by_group[g][s] for s in steps]
        mean = np.array([np.mean(v) for v in vals])
        ax.plot(steps, mean, label=str(g))
        ax.fill_between(steps, [min(v) for v in vals], [max(v) for v in vals], alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(ylabel or metric)
    if len(by_group) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_value_slice(grid, path, fixed=None, title: str | None = None) -> Path:
    """Heat map of a 2-D slice of a value grid with its zero level set."""
    spec = grid.spec
    arr = grid.array
    if spec.ndim > 2:
        idx = [slice(None), slice(None)] + [0 if fixed is None else fixed[i] for i in range(spec.ndim - 2)]
        arr = arr[tuple(idx)]
    a0, a1 = spec.axis(0), spec.axis(1)
    fig, ax = plt.subplots(figsize=(5, 4))
    m = ax.pcolormesh(a0, a1, arr.T, shading="auto", cmap="RdBu")
    ax.contour(a0, a1, arr.T, levels=[0.0], colors="k")
    fig.colorbar(m, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
