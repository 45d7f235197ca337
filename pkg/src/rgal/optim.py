"""SGD with momentum and weight decay, and the cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def cosine_lr(step: float, total: float, lr_max: float, lr_min: float) -> float:
    if total <= 0 or step >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def sgd_step(params, grads, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, velocity=None):
    """v <- momentum*v + grad + weight_decay*param ; param <- param - lr*v.

    Works on plain arrays; returns (new_params, new_velocity).
    """
    new_p, new_v = [], []
    velocity = velocity if velocity is not None else [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    for p, g, v in zip(params, grads, velocity):
        p, g = np.asarray(p, dtype=float), np.asarray(g, dtype=float)
        if p.shape != g.shape:
            raise ValueError(f"sgd_step: param shape {p.shape} != grad shape {g.shape}")
        v = momentum * v + g + weight_decay * p
        new_p.append(p - lr * v)
        new_v.append(v)
    return new_p, new_v


class SGD:
    """In-place SGD over tensors. ``max_grad_norm`` rescales the joint
    gradient so its global L2 norm never exceeds that value (0 disables)."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 max_grad_norm: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _grads(self) -> list[np.ndarray]:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.max_grad_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        return grads

    def step(self) -> None:
        for i, (p, g) in enumerate(zip(self.params, self._grads())):
            v = self.momentum * self.velocity[i] + g + self.weight_decay * p.data
            self.velocity[i] = v
            p.data = p.data - self.lr * v
