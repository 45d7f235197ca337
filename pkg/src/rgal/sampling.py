"""Triplet construction and paired batch sampling.

Negatives are chosen from inverse-density weights ``1/f(d)`` of the
pairwise distance between unit-normalized vectors, where
``f(d) ∝ d^(c-2) (1 - d^2/4)^((c-3)/2)`` is the distance density of points
spread uniformly on the unit sphere in ``c`` dimensions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "distance_weighted", "focal_weighted")
BRACKET_FLOOR = 1e-8


@dataclass
class SamplingConfig:
    lambda_clip: float = 0.5
    lambda_l: float = 0.4
    lambda_u: float = 1.0
    c: int | None = None  # None: dimension of the vectors the distances are taken on
    n_triplets: int = 64
    synthesis_strategy: str = "focal_weighted"
    student_strategy: str = "distance_weighted"

    def __post_init__(self):
        if not 0 < self.lambda_l < self.lambda_u:
            raise ValueError(f"need 0 < lambda_l < lambda_u, got {self.lambda_l}, {self.lambda_u}")
        if self.lambda_clip <= 0:
            raise ValueError("lambda_clip must be positive")
        if self.c is not None and self.c < 2:
            raise ValueError("c must be >= 2")
        if self.n_triplets < 1:
            raise ValueError("n_triplets must be >= 1")
        for s in (self.synthesis_strategy, self.student_strategy):
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")


@dataclass
class TripletSet:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    # weights[k] is the distribution the k-th negative was drawn from, over
    # all batch indices (zero on invalid candidates)
    weights: np.ndarray
    warning: str | None = None

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def triplets(self) -> list[tuple[int, int, int]]:
        return list(zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist()))

    @classmethod
    def empty(cls, batch_size: int, reason: str) -> "TripletSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros((0, batch_size)), warning=reason)

    def rows(self, step: int) -> list[list]:
        """(step, a, p, n, prob_used) rows for the audit CSV."""
        return [[step, int(a), int(p), int(n), float(self.weights[k, n])]
                for k, (a, p, n) in enumerate(zip(self.anchors, self.positives, self.negatives))]


def pairwise_distances(vectors) -> np.ndarray:
    """Euclidean distances between rows after projecting them to the unit sphere."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a [B, D] batch, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot project a zero-norm vector to the unit sphere")
    u = v / norms[:, None]
    sq = np.sum((u[:, None, :] - u[None, :, :]) ** 2, axis=-1)
    d = np.sqrt(np.clip(sq, 0.0, 4.0))
    np.fill_diagonal(d, 0.0)
    return d


def f_density(d, c: int):
    """Unnormalized density of pairwise unit-sphere distances."""
    d = np.asarray(d, dtype=np.float64)
    if c < 2:
        raise ValueError("c must be >= 2")
    if np.any(d < 0) or np.any(d > 2):
        raise ValueError("distance must lie in [0, 2]")
    bracket = np.maximum(1.0 - 0.25 * d * d, BRACKET_FLOOR)
    with np.errstate(divide="ignore"):
        out = np.power(d, c - 2) * np.power(bracket, (c - 3) / 2.0)
    return out if out.ndim else float(out)


def inverse_density(d, c: int) -> np.ndarray:
    with np.errstate(divide="ignore", over="ignore"):
        return 1.0 / np.asarray(f_density(d, c), dtype=np.float64)


def _normalize(w: np.ndarray) -> np.ndarray:
    return w / w.sum(axis=-1, keepdims=True)


def clipped_weights(inv_f: np.ndarray, lambda_clip: float) -> np.ndarray:
    return np.minimum(lambda_clip, inv_f)


def focal_weights(inv_f: np.ndarray, lambda_l: float, lambda_u: float) -> np.ndarray:
    return np.where((inv_f > lambda_l) & (inv_f < lambda_u), inv_f, 0.0)


def _focal_fallback(inv_f: np.ndarray, lambda_l: float, lambda_u: float) -> int:
    gap = np.maximum(lambda_l - inv_f, inv_f - lambda_u)
    # invalid candidates arrive as NaN and must lose to any valid one
    gap = np.where(np.isnan(gap), np.inf, np.minimum(gap, 1e300))
    return int(np.argmin(gap))


def distance_weighted_probs(distances, config: SamplingConfig, c: int | None = None) -> np.ndarray:
    """Pr(candidate) ∝ min(lambda_clip, 1/f(d))."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("distance weighted sampling needs at least one candidate")
    c = c if c is not None else config.c
    if c is None:
        raise ValueError("dimension parameter c is required")
    return _normalize(clipped_weights(inverse_density(d, c), config.lambda_clip))


def focal_weighted_probs(distances, config: SamplingConfig, c: int | None = None) -> np.ndarray:
    """Pr(candidate) ∝ 1/f(d) inside the open window (lambda_l, lambda_u), else 0.

    When no candidate falls inside the window, all mass goes to the one whose
    inverse density is nearest to it.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("focal weighted sampling needs at least one candidate")
    c = c if c is not None else config.c
    if c is None:
        raise ValueError("dimension parameter c is required")
    inv_f = inverse_density(d, c)
    w = focal_weights(inv_f, config.lambda_l, config.lambda_u)
    if w.sum() <= 0:
        w = np.zeros_like(inv_f)
        w[_focal_fallback(inv_f, config.lambda_l, config.lambda_u)] = 1.0
    return _normalize(w)


def negative_probs(distances, strategy: str, config: SamplingConfig, c: int) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    if strategy == "random":
        if d.size == 0:
            raise ValueError("random sampling needs at least one candidate")
        return np.full(d.shape, 1.0 / d.size)
    if strategy == "distance_weighted":
        return distance_weighted_probs(d, config, c)
    if strategy == "focal_weighted":
        return focal_weighted_probs(d, config, c)
    raise ValueError(f"unknown strategy {strategy!r}")


def _row_probs(dist: np.ndarray, valid: np.ndarray, strategy: str, config: SamplingConfig, c: int) -> np.ndarray:
    """Vectorized negative_probs over rows restricted to ``valid`` candidates."""
    if strategy == "random":
        w = valid.astype(np.float64)
    else:
        inv_f = inverse_density(np.where(valid, dist, 1.0), c)
        if strategy == "distance_weighted":
            w = np.where(valid, clipped_weights(inv_f, config.lambda_clip), 0.0)
        else:
            w = np.where(valid, focal_weights(inv_f, config.lambda_l, config.lambda_u), 0.0)
            for r in np.flatnonzero((w.sum(axis=1) <= 0) & valid.any(axis=1)):
                masked = np.where(valid[r], inv_f[r], np.nan)
                w[r, _focal_fallback(masked, config.lambda_l, config.lambda_u)] = 1.0
    sums = w.sum(axis=1, keepdims=True)
    return np.divide(w, sums, out=np.zeros_like(w), where=sums > 0)


def _draw_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def draw_triplets(labels, probs, config: SamplingConfig, strategy: str,
                  rng: np.random.Generator, n_triplets: int | None = None) -> TripletSet:
    """Build triplets from one batch.

    Anchors cycle through a shuffled list of samples that have a same-label
    partner; positives are drawn uniformly among those partners; negatives
    by ``strategy`` over distances between the rows of ``probs``.
    """
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=np.float64)
    b = len(labels)
    if probs.shape[0] != b:
        raise ValueError(f"labels ({b}) and probs ({probs.shape[0]}) disagree")
    n = n_triplets if n_triplets is not None else config.n_triplets

    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    ok = same.any(axis=1) & diff.any(axis=1)
    anchors_ok = np.flatnonzero(ok)
    if len(anchors_ok) == 0:
        reason = ("batch has a single label" if len(np.unique(labels)) < 2
                  else "no same-label pair in batch")
        warnings.warn(f"no valid triplets: {reason}", RuntimeWarning, stacklevel=2)
        return TripletSet.empty(b, reason)

    order = rng.permutation(anchors_ok)
    anchors = np.resize(order, n)
    positives = _draw_rows(_normalize(same[anchors].astype(np.float64)), rng)

    c = config.c if config.c is not None else probs.shape[1]
    dist = pairwise_distances(probs)
    table = _row_probs(dist, diff, strategy, config, c)
    weights = table[anchors]
    negatives = _draw_rows(weights, rng)
    return TripletSet(anchors.astype(np.int64), positives.astype(np.int64), negatives.astype(np.int64), weights)


def paired_batch_indices(labels, batch_size: int, rng: np.random.Generator, max_retries: int = 100) -> np.ndarray:
    """First half drawn uniformly; entry i+B shares the label of entry i."""
    labels = np.asarray(labels)
    if batch_size % 2 or batch_size < 2:
        raise ValueError(f"batch_size must be a positive even number, got {batch_size}")
    if len(labels) < 2:
        raise ValueError("need at least two samples for paired sampling")
    half = batch_size // 2
    by_label: dict = {}
    for i, y in enumerate(labels.tolist()):
        by_label.setdefault(y, []).append(i)
    first = rng.integers(0, len(labels), size=half)
    second = np.empty(half, dtype=np.int64)
    for k in range(half):
        for _ in range(max_retries):
            members = by_label[labels[first[k]].item()]
            if len(members) >= 2:
                break
            first[k] = rng.integers(0, len(labels))
        else:
            raise ValueError("could not find an anchor whose label has a second example")
        j = int(rng.integers(0, len(members) - 1))
        partner = members[j]
        if partner == first[k]:
            partner = members[-1]
        second[k] = partner
    return np.concatenate([first.astype(np.int64), second])
