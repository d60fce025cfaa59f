"""A small frozen decoder-only transformer with learnable prompts.

The token/position tables, attention and feed-forward weights are frozen.
Learnable state is the visual projection (frame features -> model space), a
pool of prompt rows injected as extra keys/values into the top layers behind
zero-initialised per-layer gates, and one task type embedding per task.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, apply
from .synthdata import Sample

ORDERINGS = ("VQ_A", "VA_Q", "QA_V")

# init scales (std); BRANCH_GAIN sets the residual branch size relative to the
# token embeddings (smaller keeps the random network closer to an identity map)
EMBED_STD = 1.0
PROMPT_STD = 0.02
BRANCH_GAIN = 2.0


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    model_dim: int = 32
    num_layers: int = 4
    num_heads: int = 2
    vocab_size: int = 64
    max_seq_len: int = 64
    prompt_len: int = 4
    prompt_layers: int = 4
    num_frames: int = 8
    frame_feature_dim: int = 16
    max_tasks: int = 8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ModelError(f"model.{name}: must be a positive integer")
        if self.prompt_layers > self.num_layers:
            raise ModelError("model.prompt_layers: must not exceed num_layers")
        if self.model_dim % self.num_heads:
            raise ModelError("model.model_dim: must be divisible by num_heads")

    def injected_layers(self) -> list[int]:
        """Indices of the layers that receive prompts (the top ones)."""
        return list(range(self.num_layers - self.prompt_layers, self.num_layers))


@dataclass
class ModelParams:
    config: ModelConfig
    seed: int
    frozen: dict[str, Tensor]
    learnable: dict[str, Tensor]
    allocated: int = 0
    task_rows: list[int] = field(default_factory=list)  # task id per allocated E row

    @property
    def frozen_count(self) -> int:
        return sum(t.data.size for t in self.frozen.values())

    @property
    def learnable_count(self) -> int:
        return sum(t.data.size for t in self.learnable.values())

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.frozen[name].data).tobytes())
        return h.hexdigest()

    def allocate_task(self, task_id: int) -> int:
        """Activate the next task type embedding row for ``task_id``."""
        if task_id in self.task_rows:
            return self.task_rows.index(task_id)
        if self.allocated >= self.config.max_tasks:
            raise ModelError(f"model.max_tasks: cannot allocate more than {self.config.max_tasks} tasks")
        self.task_rows.append(task_id)
        self.allocated += 1
        return self.allocated - 1

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            self.seed,
            {k: Tensor(v.data.copy()) for k, v in self.frozen.items()},
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.learnable.items()},
            self.allocated,
            list(self.task_rows),
        )


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialisation. Frozen and learnable weights use separate streams."""
    c = config
    frozen_ss, learn_ss = np.random.SeedSequence([int(seed), 1]).spawn(2)
    rf = np.random.default_rng(frozen_ss)
    rl = np.random.default_rng(learn_ss)
    d, f = c.model_dim, 4 * c.model_dim
    frozen = {
        "tok_emb": rf.normal(0.0, EMBED_STD / math.sqrt(d), (c.vocab_size, d)),
        "pos_emb": rf.normal(0.0, EMBED_STD / math.sqrt(d), (c.max_seq_len, d)),
    }
    branch = BRANCH_GAIN / math.sqrt(d) / math.sqrt(d)
    for layer in range(c.num_layers):
        for name in ("wq", "wk", "wv"):
            frozen[f"l{layer}.{name}"] = rf.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        frozen[f"l{layer}.wo"] = rf.normal(0.0, branch, (d, d))
        frozen[f"l{layer}.w1"] = rf.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        frozen[f"l{layer}.w2"] = rf.normal(0.0, BRANCH_GAIN / math.sqrt(f) / math.sqrt(d), (f, d))
    e = rl.standard_normal((c.max_tasks, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    learnable = {
        "visual_proj": rl.normal(0.0, EMBED_STD / math.sqrt(d), (c.frame_feature_dim, d)),
        "prompts": rl.normal(0.0, PROMPT_STD, (c.prompt_len * c.prompt_layers, d)),
        "gates": np.zeros(c.prompt_layers),
        "task_emb": e,
    }
    return ModelParams(
        config,
        int(seed),
        {k: Tensor(v) for k, v in frozen.items()},
        {k: Tensor(v, requires_grad=True) for k, v in learnable.items()},
    )


@dataclass(frozen=True)
class Segments:
    """Start offsets of the three segments plus total length."""

    ordering: str
    starts: tuple[int, int, int]
    length: int

    def span(self, name: str) -> tuple[int, int]:
        """(start, stop) of segment 'V', 'Q' or 'A'."""
        names = {"VQ_A": "VQA", "VA_Q": "VAQ", "QA_V": "QAV"}[self.ordering]
        i = names.index(name)
        stop = self.starts[i + 1] if i < 2 else self.length
        return self.starts[i], stop


def _check_ids(ids: np.ndarray, config: ModelConfig, name: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ModelError(f"{name}: token id out of vocabulary (size {config.vocab_size})")


def embed_batch(
    params: ModelParams,
    frames: np.ndarray,
    questions: np.ndarray,
    answers: np.ndarray,
    ordering: str,
) -> tuple[Tensor, Tensor, Segments]:
    """Embed one sample or a batch of equal-length samples.

    Batched inputs are frames (B, N_v, F), questions (B, N_q), answers (B, N_a);
    a single sample drops the leading axis. Returns the embedded sequence,
    the projected visual tokens and the segment boundaries.
    """
    c = params.config
    if ordering not in ORDERINGS:
        raise ModelError(f"unknown ordering {ordering!r}")
    if frames.ndim not in (2, 3) or frames.shape[-1] != c.frame_feature_dim:
        raise ModelError(f"frames: expected feature dimension {c.frame_feature_dim}, got shape {frames.shape}")
    _check_ids(questions, c, "question")
    _check_ids(answers, c, "answer")
    nv, nq, na = frames.shape[-2], questions.shape[-1], answers.shape[-1]
    total = nv + nq + na
    if total > c.max_seq_len:
        raise ModelError(f"sequence length {total} exceeds max_seq_len {c.max_seq_len}")
    tok = params.frozen["tok_emb"]
    v = apply("matmul", [Tensor(frames), params.learnable["visual_proj"]])
    q = apply("embedding", [tok], indices=questions)
    a = apply("embedding", [tok], indices=answers)
    if ordering == "VQ_A":
        parts, starts = [v, q, a], (0, nv, nv + nq)
    elif ordering == "VA_Q":
        parts, starts = [v, a, q], (0, nv, nv + na)
    else:
        parts, starts = [q, a, v], (0, nq, nq + na)
    return apply("concat", parts), v, Segments(ordering, starts, total)


def embed_inputs(params: ModelParams, sample: Sample, ordering: str) -> tuple[Tensor, Segments]:
    """Single-sample embedding of (video, question, gold answer)."""
    x, _, seg = embed_batch(
        params,
        sample.frames,
        np.asarray(sample.question),
        np.asarray(sample.answer),
        ordering,
    )
    return x, seg


def forward_pass(params: ModelParams, embedded: Tensor, use_prompts: bool = True) -> tuple[Tensor, Tensor]:
    """Run the transformer. Returns (final hidden states, logits)."""
    c = params.config
    fz = params.frozen
    seq_len = embedded.shape[-2]
    if seq_len > c.max_seq_len:
        raise ModelError(f"sequence length {seq_len} exceeds max_seq_len {c.max_seq_len}")
    pos_idx = np.arange(seq_len)
    if embedded.data.ndim == 3:
        pos_idx = np.broadcast_to(pos_idx, embedded.shape[:2])
    x = apply("add", [embedded, apply("embedding", [fz["pos_emb"]], indices=pos_idx)])
    injected = {layer: k for k, layer in enumerate(c.injected_layers())}
    prompts = params.learnable["prompts"]
    gates = params.learnable["gates"]
    for layer in range(c.num_layers):
        h = apply("layer_norm", [x])
        q = apply("matmul", [h, fz[f"l{layer}.wq"]])
        k = apply("matmul", [h, fz[f"l{layer}.wk"]])
        v = apply("matmul", [h, fz[f"l{layer}.wv"]])
        if use_prompts and layer in injected:
            j = injected[layer]
            p = apply("slice", [prompts], start=j * c.prompt_len, stop=(j + 1) * c.prompt_len)
            pk = apply("matmul", [p, fz[f"l{layer}.wk"]])
            pv = apply("matmul", [p, fz[f"l{layer}.wv"]])
            gate = apply("slice", [gates], start=j, stop=j + 1)
            att = apply("attention", [q, k, v, pk, pv, gate], num_heads=c.num_heads)
        else:
            att = apply("attention", [q, k, v], num_heads=c.num_heads)
        x = apply("add", [x, apply("matmul", [att, fz[f"l{layer}.wo"]])])
        h = apply("layer_norm", [x])
        ff = apply("matmul", [apply("gelu", [apply("matmul", [h, fz[f"l{layer}.w1"]])]), fz[f"l{layer}.w2"]])
        x = apply("add", [x, ff])
    hidden = apply("layer_norm", [x])
    logits = apply("matmul", [hidden, fz["tok_emb"]], transpose_b=True)
    return hidden, logits


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def score_samples(params: ModelParams, samples: Sequence[Sample]) -> list[np.ndarray]:
    """Length-normalised log-likelihood of every candidate of every sample.

    Identical candidate sequences are scored once, so they tie exactly.
    Sequences of equal length share a batched forward pass.
    """
    jobs: dict[tuple[int, ...], list] = {}
    keys = []
    for si, s in enumerate(samples):
        if not s.candidates:
            raise ModelError("candidates: empty candidate list")
        uniq: dict[tuple[int, ...], int] = {}
        for cand in s.candidates:
            if cand not in uniq:
                uniq[cand] = len(uniq)
                shape = (s.frames.shape[0], len(s.question), len(cand))
                jobs.setdefault(shape, []).append((si, cand))
        keys.append(uniq)
    result: dict[tuple[int, tuple[int, ...]], float] = {}
    for (nv, nq, na), items in jobs.items():
        frames = np.stack([samples[si].frames for si, _ in items])
        qs = np.asarray([samples[si].question for si, _ in items])
        ans = np.asarray([cand for _, cand in items])
        x, _, seg = embed_batch(params, frames, qs, ans, "VQ_A")
        _, logits = forward_pass(params, x, use_prompts=True)
        a0, a1 = seg.span("A")
        logp = _log_softmax(logits.data[:, a0 - 1: a1 - 1, :])
        picked = np.take_along_axis(logp, ans[..., None], axis=-1)[..., 0]
        for (si, cand), lp in zip(items, picked.sum(axis=1) / na):
            result[(si, cand)] = float(lp)
    return [np.array([result[(si, c)] for c in s.candidates]) for si, s in enumerate(samples)]


def score_candidates(params: ModelParams, sample: Sample) -> tuple[int, np.ndarray]:
    """(chosen index, per-candidate scores); ties go to the lowest index."""
    if len(sample.candidates) == 0:
        raise ModelError("candidates: empty candidate list")
    scores = score_samples(params, [sample])[0]
    return int(np.argmax(scores)), scores


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    doc = {
        "config": asdict(params.config),
        "seed": params.seed,
        "allocated": params.allocated,
        "task_rows": params.task_rows,
        "frozen": {k: {"shape": list(v.shape), "values": v.values.tolist()} for k, v in sorted(params.frozen.items())},
        "learnable": {
            k: {"shape": list(v.shape), "values": v.values.tolist()} for k, v in sorted(params.learnable.items())
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())

    def arr(entry):
        return np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])

    return ModelParams(
        ModelConfig(**doc["config"]),
        doc["seed"],
        {k: Tensor(arr(v)) for k, v in doc["frozen"].items()},
        {k: Tensor(arr(v), requires_grad=True) for k, v in doc["learnable"].items()},
        doc["allocated"],
        list(doc["task_rows"]),
    )
