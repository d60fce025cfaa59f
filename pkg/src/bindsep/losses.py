"""Training objectives: answer/question token NLL, frame InfoNCE, prompt contrast.

All objectives are negative log-probabilities summed over a sample's tokens
(or frames); ``total_loss`` averages them over a batch and combines them as
``answer + question + video + gamma * prompt``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, apply
from .model import ModelParams, embed_batch, forward_pass
from .synthdata import Sample

DEFAULT_GAMMA = 0.10
DEFAULT_TAU = 1.25


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossFlags:
    use_Q: bool = True
    use_V: bool = True
    use_P: bool = True
    prompts_in_aux: bool = True

    @classmethod
    def parse(cls, text: str, prompts_in_aux: bool = True) -> "LossFlags":
        """'QVP', 'Q,V', 'none' or '' -> flags."""
        t = text.strip().upper().replace(",", "").replace("+", "")
        if t in ("", "NONE"):
            t = ""
        bad = set(t) - set("QVP")
        if bad:
            raise LossError(f"flags: unknown loss flag(s) {''.join(sorted(bad))}")
        return cls("Q" in t, "V" in t, "P" in t, prompts_in_aux)

    def label(self) -> str:
        s = "Q" * self.use_Q + "V" * self.use_V + "P" * self.use_P
        return s or "none"


@dataclass(frozen=True)
class LossBreakdown:
    l_answer: float
    l_question: float
    l_video: float
    l_prompt: float
    total: float
    gamma: float
    tau: float


def token_nll(logits: Tensor, ids: np.ndarray, span: tuple[int, int]) -> Tensor:
    """Sum of -log p(token) over ``span``; position i predicts token i + 1."""
    start, stop = span
    if stop <= start:
        raise LossError("empty target span")
    if start < 1:
        raise LossError("target span must not start at position 0 (nothing predicts it)")
    ids = np.asarray(ids)
    if ids.shape[-1] != stop - start:
        raise LossError(f"span length {stop - start} does not match {ids.shape[-1]} target ids")
    window = apply("slice", [logits], start=start - 1, stop=stop - 1)
    return apply("cross_entropy", [window], targets=ids)


def answer_loss(logits: Tensor, answer_ids, span: tuple[int, int]) -> Tensor:
    if span[1] <= span[0]:
        raise LossError("empty answer span")
    return token_nll(logits, answer_ids, span)


def question_loss(logits: Tensor, question_ids, span: tuple[int, int]) -> Tensor:
    if span[1] <= span[0]:
        raise LossError("empty question span")
    return token_nll(logits, question_ids, span)


def video_infonce_loss(hidden: Tensor, visual: Tensor, span: tuple[int, int]) -> Tensor:
    """Frame InfoNCE: the state before frame k+1 should pick v_{k+1} among all frames.

    ``hidden`` is (S, D) or (B, S, D) from the QA_V ordering, ``visual`` the
    projected frames (N_v, D) or (B, N_v, D), ``span`` the visual segment.
    """
    start, stop = span
    n = stop - start
    if n < 2:
        raise LossError("video InfoNCE needs at least 2 frames")
    if start < 1:
        raise LossError("visual segment must be preceded by at least one token")
    h = apply("slice", [hidden], start=start - 1, stop=stop - 1)
    scores = apply("matmul", [h, visual], transpose_b=True)
    targets = np.broadcast_to(np.arange(n), scores.shape[:-1])
    return apply("cross_entropy", [scores], targets=np.ascontiguousarray(targets))


def reweight(q: Tensor, prompts: Tensor) -> Tensor:
    """p~ = (q . P^T) . P for q of shape (D,) or (B, D)."""
    return apply("matmul", [apply("matmul", [q, prompts], transpose_b=True), prompts])


def question_embedding(params: ModelParams, question_ids) -> Tensor:
    ids = np.asarray(question_ids)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise LossError("empty question")
    emb = apply("embedding", [params.frozen["tok_emb"]], indices=ids)
    return apply("mean_pool", [emb])


def reweight_prompts(question_ids, params: ModelParams) -> Tensor:
    """Question-conditioned mix of all prompt rows, from mean input embeddings."""
    return reweight(question_embedding(params, question_ids), params.learnable["prompts"])


def prompt_contrastive_loss(
    p_tilde: Tensor,
    task_emb: Tensor,
    current: int,
    seen: Sequence[int],
    tau: float,
    allocated: int | None = None,
) -> Tensor:
    """-log softmax over seen task embeddings of p~ . e / tau, at the current task.

    ``p_tilde`` is (D,) or (B, D); ``current`` and ``seen`` index rows of
    ``task_emb``. Batched input returns the sum over the batch.
    """
    if tau <= 0:
        raise LossError("tau must be positive")
    seen = [int(s) for s in seen]
    limit = task_emb.shape[0] if allocated is None else allocated
    if any(not 0 <= s < limit for s in seen):
        raise LossError(f"task embedding index out of the {limit} allocated rows")
    if current not in seen:
        raise LossError("current task must be in the seen set")
    rows = apply("embedding", [task_emb], indices=np.asarray(seen))
    sims = apply("scale", [apply("matmul", [p_tilde, rows], transpose_b=True)], factor=1.0 / tau)
    target = np.full(sims.shape[:-1], seen.index(current), dtype=np.int64)
    return apply("cross_entropy", [sims], targets=target)


def _group(samples: Sequence[Sample]):
    groups = defaultdict(list)
    for s in samples:
        groups[(s.frames.shape, len(s.question), len(s.answer))].append(s)
    return list(groups.values())


def total_loss(
    samples: Sequence[Sample],
    params: ModelParams,
    seen: Sequence[int],
    current: int,
    flags: LossFlags = LossFlags(),
    gamma: float = DEFAULT_GAMMA,
    tau: float = DEFAULT_TAU,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[Tensor, LossBreakdown]:
    """Batch-mean training objective and its per-component breakdown.

    ``seen`` / ``current`` are task-embedding rows. Samples are grouped by
    shape and each group runs as one batched forward pass per ordering.
    """
    if not samples:
        raise LossError("empty batch")
    parts: dict[str, list[Tensor]] = {"A": [], "Q": [], "V": [], "P": []}
    for group in _group(samples):
        frames = np.stack([s.frames for s in group])
        qs = np.asarray([s.question for s in group])
        ans = np.asarray([s.answer for s in group])
        x, _, seg = embed_batch(params, frames, qs, ans, "VQ_A")
        _, logits = forward_pass(params, x, use_prompts=True)
        parts["A"].append(answer_loss(logits, ans, seg.span("A")))
        if flags.use_Q:
            x, _, seg = embed_batch(params, frames, qs, ans, "VA_Q")
            _, logits = forward_pass(params, x, use_prompts=flags.prompts_in_aux)
            parts["Q"].append(question_loss(logits, qs, seg.span("Q")))
        if flags.use_V:
            x, vis, seg = embed_batch(params, frames, qs, ans, "QA_V")
            hidden, _ = forward_pass(params, x, use_prompts=flags.prompts_in_aux)
            parts["V"].append(video_infonce_loss(hidden, vis, seg.span("V")))
        if flags.use_P:
            p = reweight_prompts(qs, params)
            parts["P"].append(
                prompt_contrastive_loss(p, params.learnable["task_emb"], current, seen, tau, params.allocated)
            )

    def summed(ts):
        out = ts[0]
        for t in ts[1:]:
            out = apply("add", [out, t])
        return out

    n = len(samples)
    coef = {"A": weights[0], "Q": weights[1], "V": weights[2], "P": gamma}
    values = {}
    total = None
    for key in "AQVP":
        if not parts[key]:
            values[key] = 0.0
            continue
        comp = apply("scale", [summed(parts[key])], factor=1.0 / n)
        values[key] = comp.item()
        term = comp if coef[key] == 1.0 else apply("scale", [comp], factor=coef[key])
        total = term if total is None else apply("add", [total, term])
    breakdown = LossBreakdown(
        values["A"],
        values["Q"],
        values["V"],
        values["P"],
        weights[0] * values["A"] + weights[1] * values["Q"] + weights[2] * values["V"] + gamma * values["P"],
        gamma,
        tau,
    )
    return total, breakdown
