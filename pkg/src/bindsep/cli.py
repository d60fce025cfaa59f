"""Command-line experiment runner.

    bindsep gen-data --config exp.json --out runs/data
    bindsep train --config exp.json --seed 0 --flags QVP --out runs/full
    bindsep ablate --config grid.json --out runs/grid
    bindsep export-embeddings runs/full/seed_0

Every command writes only under ``--out`` (default: the config's
``output_dir``) and exits non-zero with a one-line ``error:`` message on
failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import MetricError, export_embeddings, metrics_report, write_accuracy_matrix
from .losses import LossError, LossFlags
from .model import ModelError, build_model, load_checkpoint
from .synthdata import DataError, TaskStream, generate_task_stream, load_jsonl, set_task_order
from .trainer import TrainingError, train_continual, warm_fit_backbone, write_loss_log

log = logging.getLogger("bindsep")

SUMMARY_FIELDS = ("cell", "flags", "gamma", "tau", "prompt_layers", "order", "seed", "avg_acc", "avg_fog")
EXPECTED_ERRORS = (ConfigError, DataError, ModelError, TrainingError, MetricError, LossError, OSError)


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    """The configured task stream, from JSONL if given, else generated."""
    d = cfg.data
    if d.jsonl:
        stream = load_jsonl(d.jsonl, cfg.model.vocab_size)
        return set_task_order(stream, d.order) if d.order is not None else stream
    return generate_task_stream(
        d.tasks,
        d.order,
        d.master_seed,
        num_frames=cfg.model.num_frames,
        frame_dim=cfg.model.frame_feature_dim,
        num_candidates=d.num_candidates,
        noise_std=d.noise_std,
    )


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_seed(cfg: ExperimentConfig, seed: int, run_dir: Path, stream: TaskStream | None = None,
             figures: bool = True) -> dict:
    """Train one seed into ``run_dir``; returns the metrics dict."""
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = copy.deepcopy(cfg)
    cfg.train.seed = seed
    _dump_json(cfg.to_dict(), run_dir / "config_echo.json")
    stream = stream if stream is not None else build_stream(cfg)
    params = build_model(cfg.model, seed)
    if cfg.backbone_warm_fit_steps:
        warm_fit_backbone(params, cfg.backbone_warm_fit_steps, seed)
    result = train_continual(params, stream, cfg.train, run_dir)
    write_loss_log(result.loss_log, run_dir / "loss_log.csv")
    write_accuracy_matrix(result.matrix, run_dir / "accuracy_matrix.csv", result.task_order)
    report = metrics_report(result.matrix, result.task_order, cfg.fog_include_last)
    metrics = report.to_dict()
    metrics.update(
        seed=seed,
        flags=cfg.train.flags.label(),
        accuracy_matrix=result.matrix,
        frozen_hash_before=result.frozen_hash_before,
        frozen_hash_after=result.frozen_hash_after,
        checkpoints=[f"checkpoints/after_task_{k}.json" for k in range(len(result.matrix))],
    )
    _dump_json(metrics, run_dir / "metrics.json")
    if figures:
        from . import plotting

        plotting.plot_accuracy_matrix(result.matrix, result.task_order, run_dir / "accuracy_matrix.png")
        plotting.plot_loss_log(result.loss_log, run_dir / "loss_log.png")
    return metrics


def _print_table(rows: list[tuple[str, str, float, float]]) -> None:
    print(f"{'cell':<28} {'seed':>5} {'Avg. Acc':>9} {'Avg. Fog':>9}")
    for cell, seed, acc, fog in rows:
        print(f"{cell:<28} {seed:>5} {acc:>9.4f} {fog:>9.4f}")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "flags", None) is not None:
        try:
            cfg.train.flags = LossFlags.parse(args.flags, cfg.train.flags.prompts_in_aux)
        except LossError as exc:
            raise ConfigError(f"--flags: {exc}") from None
    if getattr(args, "order", None) is not None:
        try:
            order = [int(x) for x in args.order.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--order: expected comma-separated integers, got {args.order!r}") from None
        n = len(cfg.data.tasks) if not cfg.data.jsonl else None
        if n is not None and sorted(order) != list(range(n)):
            raise ConfigError(f"--order: not a permutation of the {n} tasks")
        cfg.data.order = order
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    return cfg


def _seeds(cfg: ExperimentConfig, args) -> list[int]:
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return list(range(cfg.repeats))


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = build_stream(cfg)
    stream.to_jsonl(out / "dataset.jsonl")
    _dump_json(cfg.to_dict(), out / "config_echo.json")
    n = sum(len(t.train) + len(t.test) for t in stream.tasks)
    print(f"wrote dataset.jsonl: {len(stream)} tasks, {n} samples")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.output_dir)
    stream = build_stream(cfg)
    rows = []
    for seed in _seeds(cfg, args):
        m = run_seed(cfg, seed, out / f"seed_{seed}", stream, figures=not args.no_figures)
        rows.append((cfg.train.flags.label(), str(seed), m["avg_acc"], m["avg_fog"]))
    if len(rows) > 1:
        rows.append((cfg.train.flags.label(), "mean", float(np.mean([r[2] for r in rows])),
                     float(np.mean([r[3] for r in rows]))))
    _print_table(rows)
    return 0


def grid_cells(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Cartesian product of the ablation axes; an empty grid is the base config."""
    axes = cfg.ablation.axes()
    names = list(axes)
    cells = []
    for values in itertools.product(*(axes[n] for n in names)) if names else [()]:
        c = copy.deepcopy(cfg)
        parts = []
        for name, v in zip(names, values):
            if name == "flags":
                c.train.flags = LossFlags.parse(v, c.train.flags.prompts_in_aux)
                parts.append(c.train.flags.label())
            elif name == "gamma":
                c.train.gamma = v
                parts.append(f"gamma={v:g}")
            elif name == "tau":
                c.train.tau = v
                parts.append(f"tau={v:g}")
            elif name == "prompt_layers":
                try:
                    c.model = replace(c.model, prompt_layers=v)
                except ModelError as exc:
                    raise ConfigError(f"config.ablation.prompt_layers: {exc}") from None
                parts.append(f"Lp={v}")
            elif name == "orders":
                c.data.order = list(v)
                parts.append("order=" + "-".join(str(i) for i in v))
        cells.append(("_".join(parts) or c.train.flags.label(), c))
    return cells


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(cfg)
    summary: list[dict] = []
    table = []
    for name, cell in cells:
        stream = build_stream(cell)
        accs, fogs = [], []
        for seed in _seeds(cell, args):
            m = run_seed(cell, seed, out / "cells" / name / f"seed_{seed}", stream, figures=False)
            accs.append(m["avg_acc"])
            fogs.append(m["avg_fog"])
            summary.append(_summary_row(name, cell, seed, m["avg_acc"], m["avg_fog"]))
            table.append((name, str(seed), m["avg_acc"], m["avg_fog"]))
        summary.append(_summary_row(name, cell, "mean", float(np.mean(accs)), float(np.mean(fogs))))
        table.append((name, "mean", float(np.mean(accs)), float(np.mean(fogs))))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    if not args.no_figures:
        from . import plotting

        plotting.plot_ablation(summary, out / "ablation.png")
    _print_table(table)
    return 0


def _summary_row(name, cell: ExperimentConfig, seed, acc, fog) -> dict:
    order = cell.data.task_order() if not cell.data.jsonl else (cell.data.order or [])
    return {
        "cell": name,
        "flags": cell.train.flags.label(),
        "gamma": repr(cell.train.gamma),
        "tau": repr(cell.train.tau),
        "prompt_layers": cell.model.prompt_layers,
        "order": "-".join(str(i) for i in order),
        "seed": seed,
        "avg_acc": repr(float(acc)),
        "avg_fog": repr(float(fog)),
    }


def cmd_export_embeddings(args) -> int:
    run_dir = Path(args.run_dir)
    ckpts = sorted((run_dir / "checkpoints").glob("after_task_*.json"),
                   key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not ckpts:
        raise TrainingError(f"no checkpoint found under {run_dir / 'checkpoints'}")
    cfg = load_config(run_dir / "config_echo.json")
    params = load_checkpoint(ckpts[-1])
    stream = build_stream(cfg)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    n = export_embeddings(params, stream, out / "embeddings.csv")
    if not args.no_figures:
        from . import plotting

        with open(out / "embeddings.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        pts = np.asarray([[float(x) for x in r[2:]] for r in rows])
        plotting.plot_embeddings(pts, [r[0] for r in rows], [int(r[1]) for r in rows], out / "embeddings.png")
    print(f"wrote embeddings.csv: {n} rows from {ckpts[-1].name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bindsep", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train=True):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if train:
            p.add_argument("--seed", type=int, help="run only this seed (default: 0..repeats-1)")
            p.add_argument("--flags", help="auxiliary losses to enable: subset of Q,V,P or 'none'")
            p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
        p.add_argument("--order", help="task order as a comma-separated permutation")

    p = sub.add_parser("gen-data", help="write the task stream as JSONL")
    common(p, train=False)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("train", help="continual training run(s)")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("ablate", help="run the ablation grid and write summary.csv")
    common(p)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("export-embeddings", help="export task embeddings and weighted prompts")
    p.add_argument("run_dir", help="a seed directory written by train")
    p.add_argument("--out", help="output directory (default: run_dir)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
