"""Strict JSON experiment configuration.

Unknown keys are errors and every error names its field path, e.g.
``config.train.learning_rate: expected a number``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import LossFlags
from .model import ModelConfig
from .synthdata import FAMILIES, TaskSpec
from .trainer import TrainConfig, TrainingError


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    tasks: list[TaskSpec] = field(default_factory=lambda: [TaskSpec(f, seed=i) for i, f in enumerate(FAMILIES)])
    order: list[int] | None = None
    master_seed: int = 0
    num_candidates: int = 5
    noise_std: float = 0.05
    jsonl: str | None = None

    def task_order(self) -> list[int]:
        return list(self.order) if self.order is not None else list(range(len(self.tasks)))


@dataclass
class AblationGrid:
    flags: list[str] | None = None
    gamma: list[float] | None = None
    tau: list[float] | None = None
    prompt_layers: list[int] | None = None
    orders: list[list[int]] | None = None

    def axes(self) -> dict[str, list]:
        return {k: v for k, v in asdict(self).items() if v}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    repeats: int = 1
    output_dir: str = "runs"
    ablation: AblationGrid = field(default_factory=AblationGrid)
    fog_include_last: bool = False
    backbone_warm_fit_steps: int = 0

    def to_dict(self) -> dict:
        """JSON-ready form that ``parse_config`` reads back to an equal config."""
        d = asdict(self)
        d["train"]["flags"] = self.train.flags.label()
        d["train"]["prompts_in_aux"] = self.train.flags.prompts_in_aux
        return _drop_none(d)


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def _expect(value, kind, path):
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "number": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "list": isinstance(value, list),
        "dict": isinstance(value, dict),
    }[kind]
    if not ok:
        raise ConfigError(f"{path}: expected {'a number' if kind == 'number' else 'a ' + kind}")
    return value


def _strict(obj: dict, allowed, path: str) -> None:
    _expect(obj, "dict", path)
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _build(cls, obj: dict, path: str, kinds: dict[str, str], special: dict | None = None):
    _strict(obj, kinds.keys() | (special or {}).keys(), path)
    kw = {}
    for key, value in obj.items():
        if special and key in special:
            kw[key] = special[key](value, f"{path}.{key}")
        else:
            kw[key] = _expect(value, kinds[key], f"{path}.{key}")
            if kinds[key] == "number":
                kw[key] = float(value)
    try:
        return cls(**kw)
    except (ValueError, TypeError, TrainingError) as exc:
        msg = str(exc)
        if msg.startswith(("model.", "train.")):
            raise ConfigError(f"config.{msg}") from None
        if msg.split(":", 1)[0].split("/")[0] in {f.name for f in fields(cls)}:
            raise ConfigError(f"{path}.{msg}") from None
        raise ConfigError(f"{path}: {msg}") from None


def _model(obj, path):
    return _build(ModelConfig, obj, path, {f.name: "int" for f in fields(ModelConfig)})


def _int_list(value, path):
    _expect(value, "list", path)
    for i, v in enumerate(value):
        _expect(v, "int", f"{path}[{i}]")
    return [int(v) for v in value]


def _num_list(value, path):
    _expect(value, "list", path)
    for i, v in enumerate(value):
        _expect(v, "number", f"{path}[{i}]")
    return [float(v) for v in value]


def _train(obj, path):
    obj = dict(_expect(obj, "dict", path))
    pia = obj.pop("prompts_in_aux", True)
    _expect(pia, "bool", f"{path}.prompts_in_aux")

    def flags(v, p):
        _expect(v, "str", p)
        try:
            return LossFlags.parse(v, pia)
        except ValueError as exc:
            raise ConfigError(f"{p}: {exc}") from None

    def weights(v, p):
        w = _num_list(v, p)
        if len(w) != 3:
            raise ConfigError(f"{p}: expected 3 weights (answer, question, video)")
        return tuple(w)

    kinds = {
        "epochs_per_task": "int", "warmup_epochs": "int", "batch_size": "int",
        "learning_rate": "number", "weight_decay": "number", "gamma": "number", "tau": "number",
        "seed": "int", "snapshot_embeddings": "bool", "snapshot_samples_per_task": "int",
    }
    cfg = _build(TrainConfig, obj, path, kinds, {"flags": flags, "loss_weights": weights})
    if "flags" not in obj and not pia:
        cfg.flags = LossFlags(prompts_in_aux=False)
    return cfg


def _task(obj, path):
    def fam(v, p):
        _expect(v, "str", p)
        if v not in FAMILIES:
            raise ConfigError(f"{p}: unknown family {v!r} (expected one of {', '.join(FAMILIES)})")
        return v

    def sym(v, p):
        return tuple(_int_list(v, p))

    kinds = {"train_size": "int", "test_size": "int", "seed": "int"}
    return _build(TaskSpec, obj, path, kinds, {"family": fam, "alphabet": sym, "triggers": sym})


def _data(obj, path):
    def tasks(v, p):
        _expect(v, "list", p)
        if not v:
            raise ConfigError(f"{p}: at least one task is required")
        return [_task(t, f"{p}[{i}]") for i, t in enumerate(v)]

    kinds = {"master_seed": "int", "num_candidates": "int", "noise_std": "number", "jsonl": "str"}
    cfg = _build(DataConfig, obj, path, kinds, {"tasks": tasks, "order": _int_list})
    if cfg.order is not None and sorted(cfg.order) != list(range(len(cfg.tasks))):
        raise ConfigError(f"{path}.order: not a permutation of the {len(cfg.tasks)} tasks")
    return cfg


def _ablation(obj, path):
    def flags(v, p):
        _expect(v, "list", p)
        for i, f in enumerate(v):
            _expect(f, "str", f"{p}[{i}]")
            try:
                LossFlags.parse(f)
            except ValueError as exc:
                raise ConfigError(f"{p}[{i}]: {exc}") from None
        return list(v)

    def orders(v, p):
        _expect(v, "list", p)
        return [_int_list(o, f"{p}[{i}]") for i, o in enumerate(v)]

    return _build(AblationGrid, obj, path, {}, {
        "flags": flags, "gamma": _num_list, "tau": _num_list,
        "prompt_layers": _int_list, "orders": orders,
    })


def parse_config(obj: Any) -> ExperimentConfig:
    path = "config"
    kinds = {"repeats": "int", "output_dir": "str", "fog_include_last": "bool", "backbone_warm_fit_steps": "int"}
    cfg = _build(ExperimentConfig, obj, path, kinds, {
        "model": _model, "train": _train, "data": _data, "ablation": _ablation,
    })
    if cfg.repeats < 1:
        raise ConfigError("config.repeats: must be >= 1")
    if cfg.backbone_warm_fit_steps < 0:
        raise ConfigError("config.backbone_warm_fit_steps: must be >= 0")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return parse_config(obj)
