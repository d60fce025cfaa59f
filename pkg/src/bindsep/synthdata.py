"""Synthetic multiple-choice video QA task streams and JSONL ingestion.

A "video" is a sequence of frame feature vectors, each a one-hot symbol code
plus Gaussian noise. Four task families ask different questions about the
symbol sequence:

COUNT   how many times does symbol s occur            -> number token
FIRST   which symbol occurs first                     -> symbol token
AFTER   which symbol directly follows symbol s        -> symbol token
CAUSE   which trigger caused the effect two frames on -> symbol token

Each family has its own question template tokens, so tasks differ in both
their visual statistics and their language.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FAMILIES = ("COUNT", "FIRST", "AFTER", "CAUSE")

# vocabulary layout (ids < 64)
FUNCTION_WORDS = {"?": 0, "the": 1}
NUM_SYMBOLS = 8
SYMBOL_BASE = 2  # symbol s -> token SYMBOL_BASE + s
NUMBER_BASE = 10  # number n -> token NUMBER_BASE + n, n in 0..9
TEMPLATE_TOKENS = {
    "COUNT": {"how": 20, "many": 21, "times": 22},
    "FIRST": {"which": 24, "event": 25, "first": 26},
    "AFTER": {"what": 28, "follows": 29},
    "CAUSE": {"why": 32, "did": 33, "it": 34, "happen": 35},
}
TEMPLATES = {
    "COUNT": ["how", "many", "times", "<s>", "?"],
    "FIRST": ["which", "event", "the", "first", "?"],
    "AFTER": ["what", "follows", "the", "<s>", "?"],
    "CAUSE": ["why", "did", "it", "happen", "?"],
}
DEFAULT_ALPHABETS = {
    "COUNT": (0, 1, 2, 3),
    "FIRST": (2, 3, 4, 5, 6, 7),
    "AFTER": (0, 1, 2, 3, 4, 5, 6, 7),
    "CAUSE": (0, 1, 2, 3, 4, 5, 6, 7),
}
DEFAULT_TRIGGERS = (0, 1, 2, 3, 4)
CAUSE_DELAY = 2


def symbol_token(s: int) -> int:
    return SYMBOL_BASE + s


def number_token(n: int) -> int:
    return NUMBER_BASE + n


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    task_id: int
    frames: np.ndarray  # (num_frames, frame_feature_dim)
    question: tuple[int, ...]
    candidates: tuple[tuple[int, ...], ...]
    gold_index: int
    symbols: tuple[int, ...] | None = None  # generating sequence, if synthetic

    @property
    def answer(self) -> tuple[int, ...]:
        return self.candidates[self.gold_index]

    def to_json(self, split: str) -> dict:
        return {
            "task_id": self.task_id,
            "frames": self.frames.tolist(),
            "question": list(self.question),
            "candidates": [list(c) for c in self.candidates],
            "gold_index": self.gold_index,
            "split": split,
        }


@dataclass
class TaskSpec:
    family: str
    train_size: int = 256
    test_size: int = 64
    seed: int = 0
    alphabet: tuple[int, ...] | None = None
    triggers: tuple[int, ...] | None = None  # CAUSE only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"family: unknown task family {self.family!r}")
        if self.train_size < 0 or self.test_size < 0:
            raise DataError("train_size/test_size: must be non-negative")
        if self.alphabet is None:
            self.alphabet = DEFAULT_ALPHABETS[self.family]
        self.alphabet = tuple(int(s) for s in self.alphabet)
        if self.family == "CAUSE" and self.triggers is None:
            self.triggers = DEFAULT_TRIGGERS
        if self.triggers is not None:
            self.triggers = tuple(int(s) for s in self.triggers)
        if any(not 0 <= s < NUM_SYMBOLS for s in self.alphabet):
            raise DataError(f"alphabet: symbols must lie in 0..{NUM_SYMBOLS - 1}")


@dataclass
class Task:
    spec: TaskSpec | None
    task_id: int
    train: list[Sample]
    test: list[Sample]


@dataclass
class TaskStream:
    tasks: list[Task]
    order: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.order:
            self.order = list(range(len(self.tasks)))

    def __len__(self) -> int:
        return len(self.tasks)

    def ordered(self) -> list[Task]:
        return [self.tasks[i] for i in self.order]

    def to_jsonl(self, path: str | Path) -> None:
        """Write every sample (in training order) in the JSONL ingestion schema."""
        with open(path, "w", encoding="utf-8") as fh:
            for task in self.ordered():
                for split, samples in (("train", task.train), ("test", task.test)):
                    for s in samples:
                        fh.write(json.dumps(s.to_json(split), separators=(",", ":")) + "\n")


def causal_rule(triggers: Sequence[int]) -> dict[int, int]:
    """Trigger -> effect map: a cyclic shift of the trigger set (a derangement)."""
    trig = list(triggers)
    return {t: trig[(i + 1) % len(trig)] for i, t in enumerate(trig)}


def answer_symbols(family: str, symbols: Sequence[int], target: int | None, triggers=None) -> int:
    """Apply a family's rule to the symbol sequence; returns the answer value."""
    seq = list(symbols)
    if family == "COUNT":
        return seq.count(target)
    if family == "FIRST":
        return seq[0]
    if family == "AFTER":
        return seq[seq.index(target) + 1]
    if family == "CAUSE":
        rule = causal_rule(triggers)
        for i in range(len(seq) - CAUSE_DELAY):
            if seq[i] in rule and rule[seq[i]] == seq[i + CAUSE_DELAY]:
                return seq[i]
        raise DataError("no cause-effect pair in sequence")
    raise DataError(f"unknown family {family}")


def _question(family: str, target: int | None) -> tuple[int, ...]:
    vocab = {**FUNCTION_WORDS, **TEMPLATE_TOKENS[family]}
    out = []
    for w in TEMPLATES[family]:
        out.append(symbol_token(target) if w == "<s>" else vocab[w])
    return tuple(out)


def _draw_sequence(family, spec: TaskSpec, n: int, rng: np.random.Generator):
    alpha = np.array(spec.alphabet)
    if family == "COUNT":
        seq = rng.choice(alpha, size=n).tolist()
        return seq, int(rng.choice(alpha))
    if family == "FIRST":
        return rng.choice(alpha, size=n).tolist(), None
    if family == "AFTER":
        target = int(rng.choice(alpha))
        others = alpha[alpha != target]
        seq = rng.choice(others, size=n).tolist()
        seq[int(rng.integers(0, n - 1))] = target
        return seq, target
    # CAUSE: one trigger at i, its effect at i + delay, fillers elsewhere
    triggers = np.array(spec.triggers)
    fillers = np.array([s for s in spec.alphabet if s not in spec.triggers])
    if fillers.size == 0:
        raise DataError("alphabet: CAUSE needs at least one non-trigger filler symbol")
    rule = causal_rule(spec.triggers)
    seq = rng.choice(fillers, size=n).tolist()
    trig = int(rng.choice(triggers))
    i = int(rng.integers(0, n - CAUSE_DELAY))
    seq[i] = trig
    seq[i + CAUSE_DELAY] = rule[trig]
    return seq, None


def _answer_pool(family, spec: TaskSpec, num_frames: int) -> list[int]:
    if family == "COUNT":
        return [number_token(k) for k in range(num_frames + 1)]
    if family == "CAUSE":
        return [symbol_token(s) for s in spec.triggers]
    return [symbol_token(s) for s in spec.alphabet]


def _encode_frames(seq, frame_dim, noise_std, rng) -> np.ndarray:
    frames = np.zeros((len(seq), frame_dim))
    frames[np.arange(len(seq)), seq] = 1.0
    return frames + noise_std * rng.standard_normal(frames.shape)


def _task_seed(master_seed: int, spec_seed: int, family: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(spec_seed), zlib.crc32(family.encode())])


def generate_task(
    spec: TaskSpec,
    task_id: int,
    master_seed: int = 0,
    num_frames: int = 8,
    frame_dim: int = 16,
    num_candidates: int = 5,
    noise_std: float = 0.05,
) -> Task:
    if frame_dim < NUM_SYMBOLS:
        raise DataError(f"frame_feature_dim: must be >= {NUM_SYMBOLS}")
    if num_frames < 3:
        raise DataError("num_frames: must be >= 3")
    pool = _answer_pool(spec.family, spec, num_frames)
    if len(pool) - 1 < num_candidates - 1:
        raise DataError(
            f"num_candidates: distractor pool of {spec.family} has {len(pool) - 1} entries, needs {num_candidates - 1}"
        )
    rng = np.random.default_rng(_task_seed(master_seed, spec.seed, spec.family))
    samples = []
    seen = set()
    while len(samples) < spec.train_size + spec.test_size:
        seq, target = _draw_sequence(spec.family, spec, num_frames, rng)
        key = (tuple(seq), target)
        if key in seen:  # keeps train/test disjoint
            continue
        seen.add(key)
        value = answer_symbols(spec.family, seq, target, spec.triggers)
        gold = number_token(value) if spec.family == "COUNT" else symbol_token(value)
        distract = rng.choice([p for p in pool if p != gold], size=num_candidates - 1, replace=False)
        cands = [gold] + [int(d) for d in distract]
        perm = rng.permutation(num_candidates)
        cands = [cands[i] for i in perm]
        frames = _encode_frames(seq, frame_dim, noise_std, rng)
        samples.append(
            Sample(
                task_id=task_id,
                frames=frames,
                question=_question(spec.family, target),
                candidates=tuple((c,) for c in cands),
                gold_index=int(np.argmin(perm)),
                symbols=tuple(int(s) for s in seq),
            )
        )
    return Task(spec, task_id, samples[: spec.train_size], samples[spec.train_size:])


def text_stream(rng: np.random.Generator, n: int, pairs: int = 4) -> np.ndarray:
    """(n, pairs * (question + answer)) token ids of concatenated filled
    templates, each followed by an answer of the right type. Frame content
    is absent, so answers carry no grounding."""
    if n < 1 or pairs < 1:
        raise DataError("text_stream: n and pairs must be positive")
    rows = []
    for _ in range(n):
        row = []
        for _ in range(pairs):
            family = FAMILIES[int(rng.integers(len(FAMILIES)))]
            spec = TaskSpec(family)
            target = int(rng.choice(spec.alphabet)) if "<s>" in TEMPLATES[family] else None
            pool = _answer_pool(family, spec, 8)
            row += list(_question(family, target)) + [int(rng.choice(pool))]
        rows.append(row)
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        width = min(lengths)
        rows = [r[:width] for r in rows]
    return np.asarray(rows, dtype=np.int64)


def _check_order(order: Sequence[int], n: int) -> list[int]:
    order = [int(i) for i in order]
    if sorted(order) != list(range(n)):
        raise DataError(f"order: {order} is not a permutation of 0..{n - 1}")
    return order


def generate_task_stream(
    specs: Sequence[TaskSpec],
    order: Sequence[int] | None = None,
    master_seed: int = 0,
    **kwargs,
) -> TaskStream:
    """Generate one task per spec; task ids are spec indices."""
    if not specs:
        raise DataError("tasks: at least one task spec is required")
    order = _check_order(order if order is not None else range(len(specs)), len(specs))
    tasks = [generate_task(spec, i, master_seed, **kwargs) for i, spec in enumerate(specs)]
    return TaskStream(tasks, order)


def default_specs(train_size: int = 256, test_size: int = 64) -> list[TaskSpec]:
    return [TaskSpec(f, train_size, test_size, seed=i) for i, f in enumerate(FAMILIES)]


def set_task_order(stream: TaskStream, permutation: Sequence[int]) -> TaskStream:
    """Return a copy of ``stream`` trained in ``permutation`` order."""
    return TaskStream(stream.tasks, _check_order(permutation, len(stream.tasks)))


def split_sizes(stream: TaskStream) -> dict[int, tuple[int, int]]:
    return {t.task_id: (len(t.train), len(t.test)) for t in stream.ordered()}


_JSONL_FIELDS = ("task_id", "frames", "question", "candidates", "gold_index", "split")


def _parse_line(obj, lineno: int, vocab_size: int | None) -> tuple[Sample, str]:
    def bad(fieldname, msg):
        return DataError(f"line {lineno}: field {fieldname}: {msg}")

    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    missing = [f for f in _JSONL_FIELDS if f not in obj]
    if missing:
        raise bad(missing[0], "missing")
    if obj["split"] not in ("train", "test"):
        raise bad("split", "must be 'train' or 'test'")
    try:
        frames = np.asarray(obj["frames"], dtype=np.float64)
    except (TypeError, ValueError):
        raise bad("frames", "not a rectangular array of numbers") from None
    if frames.ndim != 2 or frames.size == 0 or not np.all(np.isfinite(frames)):
        raise bad("frames", "must be a non-empty 2-d array of finite numbers")

    def ids(x, name):
        if not isinstance(x, list) or not x or not all(isinstance(i, int) and not isinstance(i, bool) for i in x):
            raise bad(name, "must be a non-empty list of integers")
        if any(i < 0 or (vocab_size is not None and i >= vocab_size) for i in x):
            raise bad(name, "token id out of vocabulary")
        return tuple(x)

    question = ids(obj["question"], "question")
    cands = obj["candidates"]
    if not isinstance(cands, list) or len(cands) < 2:
        raise bad("candidates", "needs at least 2 candidates")
    cands = tuple(ids(c, "candidates") for c in cands)
    gold = obj["gold_index"]
    if not isinstance(gold, int) or not 0 <= gold < len(cands):
        raise bad("gold_index", "out of range")
    tid = obj["task_id"]
    if not isinstance(tid, int) or tid < 0:
        raise bad("task_id", "must be a non-negative integer")
    return Sample(tid, frames, question, cands, gold), obj["split"]


def load_jsonl(path: str | Path, vocab_size: int | None = None) -> TaskStream:
    """Read a pre-tokenized dataset; tasks are ordered by first appearance."""
    tasks: dict[int, Task] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            sample, split = _parse_line(obj, lineno, vocab_size)
            task = tasks.setdefault(sample.task_id, Task(None, sample.task_id, [], []))
            first = (task.train or task.test or [None])[0]
            if first is not None and first.frames.shape[1] != sample.frames.shape[1]:
                raise DataError(f"line {lineno}: field frames: feature dimension differs within task")
            (task.train if split == "train" else task.test).append(sample)
    if not tasks:
        raise DataError("no samples")
    return TaskStream(list(tasks.values()))
