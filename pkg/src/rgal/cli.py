"""Command-line runner: ``rgal {pretrain,distill,eval,export}``.

Precedence for every setting is flag > config file > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path


from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .data import load_dataset_csv, make_toy_dataset, pretrain_teacher, save_dataset_csv
from .io import atomic_write_text, write_csv
from .losses import LossReport
from .metrics import MetricsReport, export_embeddings, grid_agreement, top1_accuracy
from .models import build_classifier, load_params, save_params
from .training import run_rgal, save_checkpoint

log = logging.getLogger("rgal")

SCHEMA_VERSION = 1
SUBCOMMANDS = {
    "pretrain": "pretrain_teacher",
    "distill": "run_rgal",
    "eval": "eval",
    "export": "export_embeddings",
}


def _load_classifier(cfg: ExperimentConfig, path: str):
    model = build_classifier(cfg.teacher.arch())
    model.load_state_dict(load_params(path))
    model.set_requires_grad(False)
    return model


def _load_student(cfg: ExperimentConfig, teacher, path: str):
    student = cfg.model.make_student(teacher, seed=0)
    student.load_state_dict(load_params(path))
    return student


def _eval_set(cfg: ExperimentConfig, csv_path: str | None, seed_offset: int = 10_000):
    ex = cfg.experiment
    if csv_path:
        return load_dataset_csv(csv_path, num_classes=cfg.teacher.num_classes)
    if cfg.teacher.kind != "mlp_classifier" or cfg.teacher.in_dim != 2:
        return None
    return make_toy_dataset(ex.n_per_class, seed=cfg.train.seed + seed_offset)


def _write_summary(out: Path, cfg: ExperimentConfig, payload: dict, started: float) -> None:
    summary = {"schema_version": SCHEMA_VERSION, "task": cfg.experiment.task,
               "config_hash": cfg.rgal().digest(), "seed": cfg.train.seed,
               "wall_time": time.perf_counter() - started, **payload}
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _task_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    ex = cfg.experiment
    if ex.dataset_csv:
        train = load_dataset_csv(ex.dataset_csv, num_classes=cfg.teacher.num_classes)
    else:
        train = make_toy_dataset(ex.n_per_class, seed=cfg.train.seed)
        save_dataset_csv(out / "train.csv", train)
    teacher = build_classifier(cfg.teacher.arch(), seed=cfg.train.seed)
    teacher = pretrain_teacher(train, epochs=ex.teacher_epochs, seed=cfg.train.seed, model=teacher,
                               lr=cfg.train.lr_s, momentum=cfg.train.momentum,
                               weight_decay=cfg.train.weight_decay)
    save_params(out / "teacher.rgal", teacher.state_dict())
    test = _eval_set(cfg, ex.eval_csv)
    acc = top1_accuracy(teacher, test) if test is not None else None
    return {"accuracy": acc, "checkpoint": str(out / "teacher.rgal"),
            "ok": (out / "teacher.rgal").exists()}


def _task_distill(cfg: ExperimentConfig, out: Path) -> dict:
    ex = cfg.experiment
    teacher = _load_classifier(cfg, ex.teacher_checkpoint)
    test = _eval_set(cfg, ex.eval_csv)
    rcfg = cfg.rgal()

    def on_epoch(state, metrics):
        if ex.checkpoint_every and state.epoch % ex.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.ckpt", state)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_rgal(teacher, rcfg, eval_set=test, on_epoch=on_epoch, record_triplets=ex.record_triplets)
    write_csv(out / "metrics.csv", MetricsReport.HEADER, (m.row() for m in res.history))
    write_csv(out / "losses.csv", LossReport.header(), res.loss_rows)
    if ex.record_triplets:
        write_csv(out / "triplets.csv", ["step", "a", "p", "n", "prob_used"], res.state.triplet_rows)
    save_params(out / "student.rgal", res.student.state_dict())
    save_params(out / "head.rgal", res.head.state_dict())
    save_checkpoint(out / "checkpoint.ckpt", res.state)
    last = res.history[-1] if res.history else MetricsReport(epoch=-1)
    return {"accuracy": last.top1_accuracy, "agreement": last.grid_agreement,
            "global_diversity": last.global_diversity, "intra_class_diversity": last.intra_class_diversity,
            "inter_class_confusion": last.inter_class_confusion, "epochs": len(res.history),
            "ok": len(res.history) == rcfg.train.epochs}


def _task_eval(cfg: ExperimentConfig, out: Path) -> dict:
    ex = cfg.experiment
    teacher = _load_classifier(cfg, ex.teacher_checkpoint)
    student = _load_student(cfg, teacher, ex.student_checkpoint)
    test = _eval_set(cfg, ex.eval_csv)
    payload = {"ok": True}
    if test is not None:
        payload["accuracy"] = top1_accuracy(student, test)
        payload["teacher_accuracy"] = top1_accuracy(teacher, test)
    if teacher.input_shape == (2,):
        payload["agreement"] = grid_agreement(teacher, student)
    return payload


def _task_export(cfg: ExperimentConfig, out: Path) -> dict:
    ex = cfg.experiment
    teacher = _load_classifier(cfg, ex.teacher_checkpoint)
    model = teacher if ex.export_model == "teacher" else _load_student(cfg, teacher, ex.student_checkpoint)
    data = _eval_set(cfg, ex.dataset_csv)
    if data is None:
        raise ValueError("export needs experiment.dataset_csv for non-toy models")
    path = export_embeddings(model, data.samples, data.labels, out / "embeddings.csv", layer=ex.export_layer)
    return {"embeddings": str(path), "rows": len(data), "ok": path.exists()}


TASK_FUNCS = {
    "pretrain_teacher": _task_pretrain,
    "run_rgal": _task_distill,
    "eval": _task_eval,
    "export_embeddings": _task_export,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    """Execute ``cfg.experiment.task``; 0 iff every task postcondition holds."""
    out = Path(cfg.experiment.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        atomic_write_text(out / "config.ini", serialize_config(cfg))
        payload = TASK_FUNCS[cfg.experiment.task](cfg, out)
        _write_summary(out, cfg, payload, started)
    except Exception as exc:  # every module error becomes a nonzero exit
        print(f"rgal: {cfg.experiment.task} failed: {exc}", file=sys.stderr)
        return 1
    return 0 if payload.get("ok", False) else 1


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgal", description="Data-free knowledge transfer on desk-scale tasks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, task in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"run task {task}")
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--out", type=str, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.epochs=5 (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        text = args.config.read_text() if args.config else ""
        overrides = _parse_set(args.set)
        overrides["experiment.task"] = SUBCOMMANDS[args.command]
        if args.out is not None:
            overrides["experiment.out_dir"] = args.out
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            overrides["train.seed"] = str(args.seed)
        cfg = parse_config(text, overrides)
    except (ConfigError, OSError) as exc:
        print(f"rgal: {exc}", file=sys.stderr)
        return 2
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
