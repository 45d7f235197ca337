#!/usr/bin/env python3
"""Distill the toy teacher into a fresh student and dump both decision maps.

Writes grid.csv (x, y, teacher, student) plus pool.csv with the synthesized
samples kept in the data pool, so the boundary picture can be plotted externally.
"""
import argparse
import json
import warnings
from pathlib import Path

import numpy as np

from rgal.experiments import toy_config, toy_teacher
from rgal.io import write_csv
from rgal.metrics import grid, grid_agreement, top1_accuracy
from rgal.training import run_rgal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--out", type=Path, default=Path("runs/toy_boundary"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    teacher, test, t_acc = toy_teacher(args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_rgal(teacher, toy_config(args.seed, args.epochs), eval_set=test,
                       on_epoch=lambda st, m: print(f"epoch {m.epoch:3d} acc {m.top1_accuracy:.3f} "
                                                    f"agree {m.grid_agreement:.4f}", flush=True))
    pts = grid()
    rows = np.column_stack([pts, teacher.predict(pts), res.student.predict(pts)])
    write_csv(args.out / "grid.csv", ["x", "y", "teacher", "student"], rows.tolist())
    pool = res.state.pool
    write_csv(args.out / "pool.csv", ["x", "y", "label"],
              np.column_stack([pool.samples, pool.labels]).tolist())
    summary = {"seed": args.seed, "teacher_accuracy": t_acc,
               "student_accuracy": top1_accuracy(res.student, test),
               "agreement": grid_agreement(teacher, res.student)}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
