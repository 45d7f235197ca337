"""Diversity and confusion diagnostics, accuracy, and embedding export.

Pair expectations run over unordered distinct pairs with the l1 distance.
Inter-class confusion is reported raw (``1 - mean``) and goes negative
once cross-class samples sit further than 1 apart.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import csv_text, atomic_write_text


@dataclass
class MetricsReport:
    epoch: int
    top1_accuracy: float | None = None
    grid_agreement: float | None = None
    global_diversity: float | None = None
    intra_class_diversity: float | None = None
    inter_class_confusion: float | None = None

    HEADER = ("epoch", "accuracy", "agreement", "l_div", "l_intra", "l_inter")

    def row(self) -> list:
        return [self.epoch, self.top1_accuracy, self.grid_agreement, self.global_diversity,
                self.intra_class_diversity, self.inter_class_confusion]

    def as_dict(self) -> dict:
        return asdict(self)


def _l1_pairs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    iu, ju = np.triu_indices(len(x), k=1)
    d = np.abs(x[:, None, :] - x[None, :, :]).sum(axis=-1)
    return d[iu, ju], iu, ju


def global_diversity(samples) -> float:
    if len(samples) < 2:
        raise ValueError("global diversity needs at least 2 samples")
    d, _, _ = _l1_pairs(samples)
    return float(d.mean())


def intra_class_diversity(samples, labels) -> float:
    labels = np.asarray(labels)
    d, iu, ju = _l1_pairs(samples)
    same = labels[iu] == labels[ju]
    if not same.any():
        warnings.warn("no same-label pair; intra-class diversity set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(d[same].mean())


def inter_class_distance(samples, labels) -> float:
    labels = np.asarray(labels)
    d, iu, ju = _l1_pairs(samples)
    cross = labels[iu] != labels[ju]
    if not cross.any():
        raise ValueError("no cross-label pair")
    return float(d[cross].mean())


def inter_class_confusion(samples, labels) -> float:
    return 1.0 - inter_class_distance(samples, labels)


def batch_metrics(samples, labels) -> dict[str, float]:
    """The three pair metrics, tolerating degenerate label layouts."""
    out = {"global_diversity": global_diversity(samples)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out["intra_class_diversity"] = intra_class_diversity(samples, labels)
    labels = np.asarray(labels)
    out["inter_class_confusion"] = (inter_class_confusion(samples, labels)
                                    if len(np.unique(labels)) > 1 else None)
    return out


def top1_accuracy(model, dataset) -> float:
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(model.predict(dataset.samples) == labels))


def grid(lo: float = -3.0, hi: float = 3.0, n: int = 100) -> np.ndarray:
    xs = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(xs, xs)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def grid_agreement(teacher, student, lo: float = -3.0, hi: float = 3.0, n: int = 100) -> float:
    """Fraction of an n x n grid over [lo, hi]^2 where both models predict the same class."""
    pts = grid(lo, hi, n)
    return float(np.mean(teacher.predict(pts) == student.predict(pts)))


def embeddings(model, samples, layer: str = "global") -> np.ndarray:
    with ad.no_grad():
        out = model.forward(samples)
    if layer == "global":
        return out.embedding.data
    if layer == "logits":
        return out.logits.data
    raise ValueError(f"unknown embedding layer {layer!r}")


def export_embeddings(model, samples, labels, path, layer: str = "global") -> Path:
    """CSV with one row per sample: embedding columns then the label."""
    emb = embeddings(model, samples, layer)
    header = [f"{layer}_{i}_of_{emb.shape[1]}" for i in range(emb.shape[1])] + ["label"]
    rows = ([*map(float, e), int(y)] for e, y in zip(emb, np.asarray(labels)))
    path = Path(path)
    atomic_write_text(path, csv_text(header, rows))
    return path
