"""Toy datasets, teacher pretraining and the synthesized-sample pool."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .io import read_csv, write_csv
from .models import ClassifierModel, mlp_classifier
from .optim import SGD, cosine_lr
from .sampling import paired_batch_indices

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


class AccessAudit:
    """Wraps a dataset and counts every read of its samples or labels."""

    def __init__(self, dataset: LabeledDataset):
        self._dataset = dataset
        self.reads = 0

    @property
    def samples(self) -> np.ndarray:
        self.reads += 1
        return self._dataset.samples

    @property
    def labels(self) -> np.ndarray:
        self.reads += 1
        return self._dataset.labels

    @property
    def num_classes(self) -> int:
        return self._dataset.num_classes

    def __len__(self) -> int:
        return len(self._dataset)


TOY_ANGLES = (90.0, 210.0, 330.0)


def make_toy_dataset(n_per_class: int, seed: int = 0, sigma: float = 0.5, radius: float = 2.0) -> LabeledDataset:
    """Three isotropic 2-D Gaussian blobs centred on a circle."""
    if n_per_class < 2:
        raise ValueError("n_per_class must be >= 2")
    rng = np.random.default_rng(seed)
    means = np.array([[radius * np.cos(np.radians(a)), radius * np.sin(np.radians(a))] for a in TOY_ANGLES])
    xs, ys = [], []
    for k, mu in enumerate(means):
        xs.append(mu + sigma * rng.standard_normal((n_per_class, 2)))
        ys.append(np.full(n_per_class, k))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), len(TOY_ANGLES))


def toy_means(radius: float = 2.0) -> np.ndarray:
    return np.array([[radius * np.cos(np.radians(a)), radius * np.sin(np.radians(a))] for a in TOY_ANGLES])


def make_image_dataset(n_per_class: int, seed: int = 0, size: int = 16, num_classes: int = 3) -> LabeledDataset:
    """Synthetic 3-channel images: class k is a bright blob in colour channel k plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    xs, ys = [], []
    for k in range(num_classes):
        for _ in range(n_per_class):
            cx, cy = rng.uniform(0.25, 0.75, size=2)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.05)
            img = 0.1 * rng.random((3, size, size))
            img[k % 3] += 0.8 * blob
            xs.append(np.clip(img, 0.0, 1.0))
            ys.append(k)
    return LabeledDataset(np.stack(xs), np.array(ys), num_classes)


def save_dataset_csv(path, dataset: LabeledDataset) -> None:
    flat = dataset.samples.reshape(len(dataset), -1)
    header = [f"x{i}" for i in range(flat.shape[1])] + ["label"]
    write_csv(path, header, ([*row.tolist(), int(y)] for row, y in zip(flat, dataset.labels)))


def load_dataset_csv(path, num_classes: int | None = None) -> LabeledDataset:
    header, rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path}: no samples")
    arr = np.array([[float(v) for v in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows])
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(arr, labels, k)


def cross_entropy(probs: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    mask = np.zeros(probs.shape)
    mask[np.arange(len(labels)), labels] = 1.0
    logp = ad.log(ad.clamp_min(probs, 1e-12))
    return ad.scale(ad.reduce_sum(ad.mul(logp, ad.Tensor(mask))), -1.0 / len(labels))


def pretrain_teacher(dataset, epochs: int = 200, seed: int = 0, model: ClassifierModel | None = None,
                     batch_size: int = 64, lr: float = 0.1, lr_min: float = 1e-4,
                     momentum: float = 0.9, weight_decay: float = 5e-4) -> ClassifierModel:
    """Supervised cross-entropy training with SGD and cosine annealing."""
    samples, labels = dataset.samples, dataset.labels
    if model is None:
        model = mlp_classifier(seed=seed, in_dim=samples.shape[1], num_classes=dataset.num_classes)
    rng = np.random.default_rng(seed + 1)
    opt = SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    n = len(labels)
    for epoch in range(epochs):
        opt.lr = cosine_lr(epoch, epochs, lr, lr_min)
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if len(idx) < 2:
                continue
            out = model.forward(samples[idx], train=True)
            loss = cross_entropy(out.probs, labels[idx])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"teacher pretraining diverged at epoch {epoch} (loss {loss.item()})")
            model.zero_grad()
            loss.backward()
            opt.step()
    model.set_requires_grad(False)
    return model


@dataclass
class DataPool:
    """Bounded store of synthesized samples kept by lowest generator loss."""

    capacity: int = 4096
    samples: np.ndarray | None = None
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    inserted: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def update(self, batch, labels, losses) -> "DataPool":
        batch = np.asarray(batch, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        losses = np.broadcast_to(np.asarray(losses, dtype=np.float64), (len(labels),))
        if len(batch) != len(labels):
            raise ValueError("batch and labels are not aligned")
        stamps = self.inserted + np.arange(len(labels))
        samples = batch if self.samples is None else np.concatenate([self.samples, batch])
        all_labels = np.concatenate([self.labels, labels])
        all_losses = np.concatenate([self.losses, losses])
        all_order = np.concatenate([self.order, stamps])
        keep = np.lexsort((all_order, all_losses))[: self.capacity]
        self.samples = samples[keep]
        self.labels = all_labels[keep]
        self.losses = all_losses[keep]
        self.order = all_order[keep]
        self.inserted += len(labels)
        return self

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("data pool is empty; run a synthesis phase first")
        if len(self) < 2 or len(np.unique(self.labels)) == len(self.labels):
            # no label repeats: paired sampling impossible, fall back to uniform draws
            idx = rng.integers(0, len(self), size=batch_size)
        else:
            idx = paired_batch_indices(self.labels, batch_size, rng)
        return idx, self.samples[idx]

    def state(self) -> dict[str, np.ndarray]:
        if self.samples is None:
            return {}
        return {"pool.samples": self.samples, "pool.labels": self.labels.astype(np.float64),
                "pool.losses": self.losses, "pool.order": self.order.astype(np.float64)}

    @classmethod
    def from_state(cls, capacity: int, inserted: int, state: dict[str, np.ndarray]) -> "DataPool":
        pool = cls(capacity=capacity, inserted=inserted)
        if "pool.samples" in state:
            pool.samples = state["pool.samples"]
            pool.labels = state["pool.labels"].astype(np.int64)
            pool.losses = state["pool.losses"]
            pool.order = state["pool.order"].astype(np.int64)
        return pool


def pool_update(pool: DataPool, batch, labels, losses) -> DataPool:
    return pool.update(batch, labels, losses)


def pool_sample(pool: DataPool, batch_size: int, rng: np.random.Generator):
    """Paired batch drawn from the pool; returns (indices, samples, stored labels)."""
    idx, x = pool.sample(batch_size, rng)
    return idx, x, pool.labels[idx]
