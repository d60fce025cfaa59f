"""Sequential-task training with AdamW, per-task warm-up and cosine decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape, apply, backward
from .evaluation import AccuracyMatrix, evaluate_task, weighted_prompt_matrix
from .losses import DEFAULT_GAMMA, DEFAULT_TAU, LossBreakdown, LossFlags, token_nll, total_loss
from .model import ModelParams, forward_pass, save_checkpoint
from .synthdata import TaskStream, set_task_order, text_stream  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

LOSS_LOG_FIELDS = ("step", "task", "l_answer", "l_question", "l_video", "l_prompt", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_per_task: int = 5
    warmup_epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 3e-2
    weight_decay: float = 0.01
    gamma: float = DEFAULT_GAMMA
    tau: float = DEFAULT_TAU
    flags: LossFlags = field(default_factory=LossFlags)
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    snapshot_embeddings: bool = False
    snapshot_samples_per_task: int = 32

    def __post_init__(self):
        if self.epochs_per_task < 0 or self.warmup_epochs < 0:
            raise TrainingError("train.epochs_per_task/warmup_epochs: must be non-negative")
        if self.warmup_epochs > self.epochs_per_task:
            raise TrainingError("train.warmup_epochs: must not exceed epochs_per_task")
        if self.batch_size <= 0:
            raise TrainingError("train.batch_size: must be positive")
        if self.learning_rate <= 0:
            raise TrainingError("train.learning_rate: must be positive")
        if self.weight_decay < 0:
            raise TrainingError("train.weight_decay: must be non-negative")
        if self.tau <= 0:
            raise TrainingError("train.tau: must be positive")


class AdamW:
    """Adam with decoupled, multiplicative weight decay."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}


def optimizer_step(
    state: AdamW,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    row_limits: dict[str, int] | None = None,
) -> None:
    """Update ``params`` in place. ``row_limits`` freezes rows >= limit of a parameter."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        rows = slice(None)
        if row_limits and k in row_limits:
            rows = slice(0, row_limits[k])
        m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
        v[rows] = b2 * v[rows] + (1.0 - b2) * g[rows] * g[rows]
        p[rows] *= 1.0 - lr * state.weight_decay
        p[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + state.eps)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up from 0, then cosine decay to 5% of ``base_lr``."""
    if warmup_steps >= total_steps:
        raise TrainingError(f"warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})")
    if not 0 <= step < total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class Snapshot:
    """Task embeddings and weighted prompts captured at the end of an epoch."""

    task: int
    epoch: int
    task_emb: np.ndarray
    task_emb_ids: list[int]
    prompts: np.ndarray
    prompt_ids: list[int]


@dataclass
class TrainResult:
    params: ModelParams
    matrix: AccuracyMatrix
    loss_log: list[tuple]
    task_order: list[int]
    frozen_hash_before: str
    frozen_hash_after: str
    snapshots: list[Snapshot] = field(default_factory=list)


def _validate(params: ModelParams, stream: TaskStream) -> None:
    c = params.config
    if len(stream) == 0:
        raise TrainingError("empty task stream")
    if len(stream) > c.max_tasks - params.allocated:
        raise TrainingError(f"stream has {len(stream)} tasks but only {c.max_tasks - params.allocated} embedding rows left")
    for task in stream.tasks:
        for s in task.train + task.test:
            if s.frames.shape[1] != c.frame_feature_dim:
                raise TrainingError(
                    f"task {task.task_id}: frame dimension {s.frames.shape[1]} != model {c.frame_feature_dim}"
                )
            if s.frames.shape[0] < 2:
                raise TrainingError(f"task {task.task_id}: need at least 2 frames per sample")
            ids = list(s.question) + [i for cand in s.candidates for i in cand]
            if max(ids) >= c.vocab_size:
                raise TrainingError(f"task {task.task_id}: token id {max(ids)} >= vocab size {c.vocab_size}")
            longest = s.frames.shape[0] + len(s.question) + max(len(cand) for cand in s.candidates)
            if longest > c.max_seq_len:
                raise TrainingError(f"task {task.task_id}: sequence length {longest} > max_seq_len {c.max_seq_len}")


def _snapshot(params: ModelParams, tasks, t_pos: int, epoch: int, per_task: int) -> Snapshot:
    pts, ids = [], []
    for task in tasks[: t_pos + 1]:
        sub = task.test[:per_task]
        if sub:
            pts.append(weighted_prompt_matrix(params, sub))
            ids += [task.task_id] * len(sub)
    d = params.config.model_dim
    return Snapshot(
        t_pos,
        epoch,
        params.learnable["task_emb"].data[: params.allocated].copy(),
        list(params.task_rows),
        np.concatenate(pts) if pts else np.empty((0, d)),
        ids,
    )


def train_continual(
    params: ModelParams,
    stream: TaskStream,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train on each task of ``stream`` in order; evaluate all seen tasks after each.

    ``params`` is updated in place. With ``out_dir`` a checkpoint is written
    after every task.
    """
    _validate(params, stream)
    tasks = stream.ordered()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 2]))
    learn = params.learnable
    opt = AdamW({k: v.shape for k, v in learn.items()}, config.weight_decay)
    hash_before = params.frozen_hash()
    matrix: AccuracyMatrix = []
    loss_log: list[tuple] = []
    snapshots: list[Snapshot] = []
    step = 0
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for t_pos, task in enumerate(tasks):
        current = params.allocate_task(task.task_id)
        seen = list(range(params.allocated))
        n = len(task.train)
        per_epoch = math.ceil(n / config.batch_size) if n else 0
        total_steps = per_epoch * config.epochs_per_task
        warmup = per_epoch * config.warmup_epochs
        if total_steps and warmup >= total_steps:
            raise TrainingError("train.warmup_epochs: warm-up must be shorter than the task's training")
        task_step = 0
        for epoch in range(config.epochs_per_task):
            order = rng.permutation(n)
            for b in range(per_epoch):
                batch = [task.train[i] for i in order[b * config.batch_size: (b + 1) * config.batch_size]]
                with Tape():
                    loss, parts = total_loss(
                        batch, params, seen, current, config.flags, config.gamma, config.tau, config.loss_weights
                    )
                if not math.isfinite(parts.total):
                    raise TrainingError(f"non-finite loss at step {step}")
                backward(loss)
                grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in learn.items()}
                lr = lr_schedule(task_step, total_steps, warmup, config.learning_rate)
                optimizer_step(opt, {k: v.data for k, v in learn.items()}, grads, lr,
                               {"task_emb": params.allocated})
                for v in learn.values():
                    v.grad = None
                loss_log.append((step, task.task_id, parts.l_answer, parts.l_question,
                                 parts.l_video, parts.l_prompt, parts.total))
                step += 1
                task_step += 1
            if config.snapshot_embeddings:
                snapshots.append(_snapshot(params, tasks, t_pos, epoch, config.snapshot_samples_per_task))
        row = [evaluate_task(params, tasks[j].test) for j in range(t_pos + 1)]
        matrix.append(row)
        log.info("after task %d (%d/%d): %s", task.task_id, t_pos + 1, len(tasks),
                 " ".join(f"{a:.3f}" for a in row))
        if ckpt_dir is not None:
            save_checkpoint(params, ckpt_dir / f"after_task_{t_pos}.json")

    hash_after = params.frozen_hash()
    return TrainResult(params, matrix, loss_log, list(stream.order), hash_before, hash_after, snapshots)


def warm_fit_backbone(
    params: ModelParams,
    steps: int,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 16,
    pairs_per_sequence: int = 4,
) -> list[float]:
    """Next-token fit of the frozen weights on held-out template text.

    Runs before continual training and leaves the weights frozen afterwards;
    the learnable parameters are not touched. Returns the per-step loss.
    """
    if steps < 0:
        raise TrainingError("backbone_warm_fit_steps: must be >= 0")
    if steps == 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    fz = params.frozen
    opt = AdamW({k: v.shape for k, v in fz.items()}, weight_decay=0.0)
    losses = []
    for t in fz.values():
        t.requires_grad = True
    try:
        for _ in range(steps):
            ids = text_stream(rng, batch_size, pairs_per_sequence)
            with Tape():
                x = apply("embedding", [fz["tok_emb"]], indices=ids)
                _, logits = forward_pass(params, x, use_prompts=False)
                loss = token_nll(logits, ids[:, 1:], (1, ids.shape[1]))
                loss = apply("scale", [loss], factor=1.0 / (ids.shape[0] * (ids.shape[1] - 1)))
            backward(loss)
            grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in fz.items()}
            optimizer_step(opt, {k: v.data for k, v in fz.items()}, grads, learning_rate)
            losses.append(loss.item())
    finally:
        for t in fz.values():
            t.requires_grad = False
            t.grad = None
    return losses


def write_loss_log(rows: Sequence[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_FIELDS)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:]])
