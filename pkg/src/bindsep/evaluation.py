"""Continual-learning metrics, embedding export and cluster separability."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .losses import reweight_prompts
from .model import ModelParams, score_samples
from .synthdata import Sample, TaskStream

AccuracyMatrix = list[list[float]]


class MetricError(ValueError):
    pass


def evaluate_task(params: ModelParams, split: Sequence[Sample]) -> float:
    """Fraction of samples whose top-scoring candidate is the gold one."""
    if not split:
        raise MetricError("empty split")
    scores = score_samples(params, split)
    hits = sum(int(np.argmax(sc)) == s.gold_index for sc, s in zip(scores, split))
    return hits / len(split)


def _check_complete(matrix: AccuracyMatrix) -> int:
    n = len(matrix)
    if n == 0:
        raise MetricError("incomplete accuracy matrix: no rows")
    for t, row in enumerate(matrix):
        if len(row) != t + 1:
            raise MetricError(f"incomplete accuracy matrix: row {t} has {len(row)} entries, expected {t + 1}")
    return n


def avg_final_accuracy(matrix: AccuracyMatrix) -> float:
    n = _check_complete(matrix)
    return float(np.mean(matrix[n - 1]))


def forgetting_per_task(matrix: AccuracyMatrix) -> list[float]:
    """Best earlier accuracy minus final accuracy for tasks 0..T-2 (unclamped)."""
    n = _check_complete(matrix)
    final = matrix[n - 1]
    return [max(matrix[t][j] for t in range(j, n - 1)) - final[j] for j in range(n - 1)]


def avg_forgetting(matrix: AccuracyMatrix, include_last: bool = False) -> float:
    """Mean forgetting over tasks 0..T-2; ``include_last`` averages over all T
    tasks instead, the last task contributing zero."""
    n = _check_complete(matrix)
    if n == 1:
        return 0.0
    per = forgetting_per_task(matrix)
    return float(sum(per) / (n if include_last else n - 1))


@dataclass
class MetricsReport:
    avg_acc: float
    avg_fog: float
    final_accuracies: list[float]
    forgetting: list[float]
    task_order: list[int]
    fog_include_last: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(matrix: AccuracyMatrix, task_order: Sequence[int], include_last: bool = False) -> MetricsReport:
    return MetricsReport(
        avg_final_accuracy(matrix),
        avg_forgetting(matrix, include_last),
        list(matrix[-1]),
        forgetting_per_task(matrix),
        list(task_order),
        include_last,
    )


def write_accuracy_matrix(matrix: AccuracyMatrix, path: str | Path, task_order: Sequence[int]) -> None:
    """One row per checkpoint; blank cells for tasks not yet trained."""
    n = len(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{task_order[j]}" for j in range(n)])
        for t, row in enumerate(matrix):
            w.writerow([task_order[t]] + [repr(float(a)) for a in row] + [""] * (n - len(row)))


def read_accuracy_matrix(path: str | Path) -> AccuracyMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [[float(x) for x in r[1:] if x != ""] for r in rows]


def weighted_prompt_matrix(params: ModelParams, samples: Sequence[Sample]) -> np.ndarray:
    """p~ for each sample as rows of a (N, D) array."""
    out = np.empty((len(samples), params.config.model_dim))
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.question), []).append(i)
    for idx in by_len.values():
        qs = np.asarray([samples[i].question for i in idx])
        out[idx] = reweight_prompts(qs, params).data
    return out


def export_embeddings(params: ModelParams, stream: TaskStream, path: str | Path) -> int:
    """Write task type embeddings and per-test-sample weighted prompts to CSV."""
    if params.allocated < 1:
        raise MetricError("no task embeddings allocated")
    d = params.config.model_dim
    rows = []
    emb = params.learnable["task_emb"].data
    for r, tid in enumerate(params.task_rows):
        rows.append(["task_embedding", tid] + [repr(float(x)) for x in emb[r]])
    for task in stream.ordered():
        if not task.test:
            continue
        for vec in weighted_prompt_matrix(params, task.test):
            rows.append(["weighted_prompt", task.task_id] + [repr(float(x)) for x in vec])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "task_id"] + [f"f{i}" for i in range(d)])
        w.writerows(rows)
    return len(rows)


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient under Euclidean distance.

    Points in singleton clusters score 0, as do points whose intra- and
    nearest-other-cluster mean distances are both 0.
    """
    x = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(lab):
        raise MetricError("points must be (N, D) with one label per point")
    uniq, inv = np.unique(lab, return_inverse=True)
    if len(uniq) < 2:
        raise MetricError("silhouette needs at least 2 distinct labels")
    dist = cdist(x, x)
    onehot = np.eye(len(uniq))[inv]
    sums = dist @ onehot  # (N, K) summed distance to each cluster
    counts = onehot.sum(axis=0)
    own = counts[inv]
    a = sums[np.arange(len(x)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(len(x)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(np.mean(s))
