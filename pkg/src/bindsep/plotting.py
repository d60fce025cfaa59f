"""Report figures, rendered off-screen next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_accuracy_matrix(matrix: Sequence[Sequence[float]], task_order: Sequence[int], path) -> Path:
    """Heatmap of accuracy after each task (rows) on each task (columns)."""
    n = len(matrix)
    grid = np.full((n, n), np.nan)
    for t, row in enumerate(matrix):
        grid[t, : len(row)] = row
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * n, 1.0 + 0.8 * n))
        im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
        for t in range(n):
            for j in range(t + 1):
                v = grid[t, j]
                ax.text(j, t, f"{v:.2f}", ha="center", va="center", color="white" if v < 0.6 else "black")
        labels = [str(k) for k in task_order[:n]]
        ax.set_xticks(range(n), labels)
        ax.set_yticks(range(n), labels)
        ax.set_xlabel("evaluated task")
        ax.set_ylabel("after training task")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="accuracy")
    return _save(fig, path)


def plot_loss_log(rows: Sequence[tuple], path) -> Path:
    """Per-step loss components, with task boundaries marked."""
    arr = np.asarray([r[2:] for r in rows], dtype=float)
    steps = np.asarray([r[0] for r in rows])
    tasks = [r[1] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        for k, name in enumerate(("answer", "question", "video", "prompt")):
            if np.any(arr[:, k]):
                ax.plot(steps, arr[:, k], lw=1.0, label=name)
        for i in range(1, len(tasks)):
            if tasks[i] != tasks[i - 1]:
                ax.axvline(steps[i], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=4)
    return _save(fig, path)


def plot_ablation(summary: Sequence[dict], path) -> Path:
    """Bar chart of per-cell mean Avg. Acc and Avg. Fog with per-seed points."""
    cells: dict[str, dict[str, list[float]]] = {}
    for row in summary:
        if row["seed"] == "mean":
            continue
        c = cells.setdefault(row["cell"], {"avg_acc": [], "avg_fog": []})
        c["avg_acc"].append(float(row["avg_acc"]))
        c["avg_fog"].append(float(row["avg_fog"]))
    names = list(cells)
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(max(5.0, 1.1 * len(names) + 2.0), 3.2))
        for ax, key, title in zip(axes, ("avg_acc", "avg_fog"), ("Avg. Acc", "Avg. Fog")):
            means = [np.mean(cells[n][key]) for n in names]
            ax.bar(x, means, color="0.75", edgecolor="0.3")
            for i, n in enumerate(names):
                ax.plot([i] * len(cells[n][key]), cells[n][key], "k.", ms=3)
            ax.axhline(0.0, color="0.3", lw=0.6)
            ax.set_xticks(x, names, rotation=45, ha="right")
            ax.set_title(title)
    return _save(fig, path)


def plot_embeddings(points: np.ndarray, kinds: Sequence[str], task_ids: Sequence[int], path) -> Path:
    """Two-component PCA scatter of task embeddings (stars) and weighted prompts (dots)."""
    x = np.asarray(points, dtype=float)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    xy = centered @ vt[:2].T
    if xy.shape[1] < 2:
        xy = np.column_stack([xy, np.zeros(len(xy))])
    kinds = np.asarray(kinds)
    ids = np.asarray(task_ids)
    cmap = plt.get_cmap("tab10")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for k, tid in enumerate(np.unique(ids)):
            m = (ids == tid) & (kinds == "weighted_prompt")
            ax.scatter(xy[m, 0], xy[m, 1], s=8, color=cmap(k % 10), alpha=0.6, label=f"task {tid}")
            m = (ids == tid) & (kinds == "task_embedding")
            ax.scatter(xy[m, 0], xy[m, 1], s=120, marker="*", color=cmap(k % 10), edgecolor="black")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False)
    return _save(fig, path)
