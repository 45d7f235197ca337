"""Desk-scale experiment recipes on the three-class toy problem."""
from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import make_toy_dataset, pretrain_teacher
from .losses import LossWeights
from .metrics import top1_accuracy
from .sampling import SamplingConfig
from .training import RGALConfig, TrainConfig, run_rgal

TOY_TRAIN_N = 100
TOY_TEST_N = 200


@lru_cache(maxsize=None)
def toy_teacher(seed: int = 0, epochs: int = 200):
    """Teacher pretrained on the toy blobs, plus its held-out test set and accuracy."""
    train = make_toy_dataset(TOY_TRAIN_N, seed=seed)
    test = make_toy_dataset(TOY_TEST_N, seed=10_000 + seed)
    teacher = pretrain_teacher(train, epochs=epochs, seed=seed)
    return teacher, test, top1_accuracy(teacher, test)


@dataclass
class ToyRun:
    seed: int
    agreement: float
    accuracy: float
    teacher_accuracy: float
    seconds: float
    intra: float
    inter_distance: float
    global_div: float


def toy_config(seed: int, epochs: int = 200, **changes) -> RGALConfig:
    """Default toy config with dotted-free overrides routed to the right section."""
    train, sampling, loss = {}, {}, {}
    for k, v in changes.items():
        if k in TrainConfig.__dataclass_fields__:
            train[k] = v
        elif k in SamplingConfig.__dataclass_fields__:
            sampling[k] = v
        elif k in LossWeights.__dataclass_fields__:
            loss[k] = v
        else:
            raise KeyError(k)
    return RGALConfig(train=TrainConfig(epochs=epochs, seed=seed, **train),
                      sampling=SamplingConfig(**sampling), loss=LossWeights(**loss))


def toy_run(seed: int, epochs: int = 200, **changes) -> ToyRun:
    teacher, test, t_acc = toy_teacher(seed)
    cfg = toy_config(seed, epochs, **changes)
    t0 = time.perf_counter()
    res = run_rgal(teacher, cfg, eval_set=test)
    dt = time.perf_counter() - t0
    hist = res.history
    last = hist[-1]

    def mean(attr):
        vals = [getattr(m, attr) for m in hist if getattr(m, attr) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    return ToyRun(seed, last.grid_agreement, last.top1_accuracy, t_acc, dt,
                  mean("intra_class_diversity"), 1.0 - mean("inter_class_confusion"), mean("global_diversity"))
