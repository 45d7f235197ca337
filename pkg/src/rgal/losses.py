"""Loss terms for the synthesis and student phases.

Every batch-level term is reduced with the arithmetic mean so that weights
do not depend on batch size. Probabilities are floored at ``PROB_FLOOR``
before any logarithm.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    tau: float = 1.0
    beta: float = 1.0
    w_adv: float = 1.0
    w_oh: float = 1.0
    w_bn: float = 1.0
    w_tri: float = 1.0
    w_emb: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")


@dataclass
class LossReport:
    phase: str
    terms: dict[str, float]
    total: float
    loss: Tensor | None = None

    TERMS = ("l_adv", "l_ntri", "l_tri", "l_oh", "l_bn", "l_emb")

    def row(self, step: int) -> list:
        return [step, self.phase] + [self.terms.get(t) for t in self.TERMS] + [self.total]

    @classmethod
    def header(cls) -> list[str]:
        return ["step", "phase", *cls.TERMS, "total"]


def _zero() -> Tensor:
    return Tensor(np.zeros(1))


def _check_probs(p: Tensor, name: str) -> None:
    if np.any(p.data < 0):
        raise ValueError(f"{name} has negative probabilities")


def _safe_log(p: Tensor) -> Tensor:
    return ad.log(ad.clamp_min(p, PROB_FLOOR))


def kl_adv(p_t: Tensor, p_s: Tensor) -> Tensor:
    """Batch-mean KL(p_t || p_s)."""
    _check_probs(p_t, "p_t")
    _check_probs(p_s, "p_s")
    if p_t.shape != p_s.shape:
        raise ValueError(f"kl_adv: shape mismatch {p_t.shape} vs {p_s.shape}")
    per_class = ad.mul(p_t, ad.sub(_safe_log(p_t), _safe_log(p_s)))
    return ad.scale(ad.reduce_sum(per_class), 1.0 / p_t.shape[0])


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    diff = ad.sub(a, b)
    return ad.reduce_sum(ad.mul(diff, diff), axes=1)


def _hinge_mean(x: Tensor) -> Tensor:
    return ad.scale(ad.reduce_sum(ad.clamp_min(x, 0.0)), 1.0 / x.shape[0])


def _check_triplet(e_a, e_p, e_n) -> None:
    if not (e_a.shape == e_p.shape == e_n.shape):
        raise ValueError(f"triplet: dimension mismatch {e_a.shape}, {e_p.shape}, {e_n.shape}")


def triplet_negative(e_a: Tensor, e_p: Tensor, e_n: Tensor, tau: float) -> Tensor:
    """[|a-n|^2 - |a-p|^2 + tau]_+ : pulls negatives in, pushes positives out."""
    e_a, e_p, e_n = ad.tensor(e_a), ad.tensor(e_p), ad.tensor(e_n)
    _check_triplet(e_a, e_p, e_n)
    if e_a.shape[0] == 0:
        return _zero()
    return _hinge_mean(ad.shift(ad.sub(_sq_dist(e_a, e_n), _sq_dist(e_a, e_p)), tau))


def triplet_positive(e_a: Tensor, e_p: Tensor, e_n: Tensor, tau: float) -> Tensor:
    """Standard margin triplet loss [|a-p|^2 - |a-n|^2 + tau]_+."""
    e_a, e_p, e_n = ad.tensor(e_a), ad.tensor(e_p), ad.tensor(e_n)
    _check_triplet(e_a, e_p, e_n)
    if e_a.shape[0] == 0:
        return _zero()
    return _hinge_mean(ad.shift(ad.sub(_sq_dist(e_a, e_p), _sq_dist(e_a, e_n)), tau))


def gather_triplets(emb: Tensor, triplets) -> tuple[Tensor, Tensor, Tensor]:
    return (ad.take_rows(emb, triplets.anchors), ad.take_rows(emb, triplets.positives),
            ad.take_rows(emb, triplets.negatives))


def one_hot_loss(p_t: Tensor) -> Tensor:
    """Cross-entropy of each row against the one-hot vector at its own argmax."""
    _check_probs(p_t, "p_t")
    mask = np.zeros(p_t.shape)
    mask[np.arange(p_t.shape[0]), np.argmax(p_t.data, axis=1)] = 1.0
    picked = ad.reduce_sum(ad.mul(_safe_log(p_t), Tensor(mask)))
    return ad.scale(picked, -1.0 / p_t.shape[0])


def bn_regularization(batch_stats, running_stats) -> Tensor:
    """Sum over layers of |mu_b - mu_r|^2 + |var_b - var_r|^2."""
    if len(batch_stats) != len(running_stats):
        raise ValueError("bn_regularization: layer count mismatch")
    total = _zero()
    for (mu_b, var_b), (mu_r, var_r) in zip(batch_stats, running_stats):
        mu_b, var_b = ad.tensor(mu_b), ad.tensor(var_b)
        mu_r, var_r = np.asarray(mu_r, dtype=float), np.asarray(var_r, dtype=float)
        if mu_b.shape != mu_r.shape or var_b.shape != var_r.shape:
            raise ValueError(f"bn_regularization: channel mismatch {mu_b.shape} vs {mu_r.shape}")
        dm = ad.sub(mu_b, Tensor(mu_r))
        dv = ad.sub(var_b, Tensor(var_r))
        total = ad.add(total, ad.add(ad.reduce_sum(ad.mul(dm, dm)), ad.reduce_sum(ad.mul(dv, dv))))
    return total


def teacher_bn_loss(bn_stats) -> Tensor:
    """L_bn from the (batch, running) pairs a classifier collects in ``collect_bn`` mode."""
    return bn_regularization([b for b, _ in bn_stats], [r for _, r in bn_stats])


def embedding_match(e_t, e_s, head) -> Tensor:
    """Batch-mean |e_t - head(e_s)|^2."""
    e_t = ad.tensor(e_t)
    proj = head(e_s)
    if proj.shape != e_t.shape:
        raise ValueError(f"embedding_match: dimension mismatch {proj.shape} vs {e_t.shape}")
    diff = ad.sub(e_t, proj)
    return ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / e_t.shape[0])


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.array([float(v)]))


def _combine(phase: str, signed: dict[str, tuple[float, object]]) -> LossReport:
    total = _zero()
    values = {}
    acc = 0.0
    for name, (coef, term) in signed.items():
        t = _as_tensor(term)
        values[name] = t.item()
        acc += coef * values[name]
        if coef != 0.0:
            total = ad.add(total, ad.scale(t, coef))
    return LossReport(phase, values, total.item(), total)


def generator_total(terms: dict, weights: LossWeights) -> LossReport:
    """-w_adv*L_adv + beta*L_ntri + w_oh*L_oh + w_bn*L_bn."""
    return _combine("synthesis", {
        "l_adv": (-weights.w_adv, terms.get("l_adv", 0.0)),
        "l_ntri": (weights.beta, terms.get("l_ntri", 0.0)),
        "l_oh": (weights.w_oh, terms.get("l_oh", 0.0)),
        "l_bn": (weights.w_bn, terms.get("l_bn", 0.0)),
    })


def student_total(terms: dict, weights: LossWeights) -> LossReport:
    """w_adv*L_adv + w_tri*L_tri + w_emb*L_emb."""
    return _combine("student", {
        "l_adv": (weights.w_adv, terms.get("l_adv", 0.0)),
        "l_tri": (weights.w_tri, terms.get("l_tri", 0.0)),
        "l_emb": (weights.w_emb, terms.get("l_emb", 0.0)),
    })
