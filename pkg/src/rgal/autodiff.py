"""Minimal reverse-mode differentiation over dense float64 arrays.

Every differentiable operation is a registered primitive: a forward function
returning ``(value, ctx)`` and an adjoint mapping ``(ctx, grad_out)`` to one
gradient per input. Graph nodes are only built when some input requires a
gradient, so frozen models cost a plain numpy forward pass.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Primitive", "PRIMITIVES", "GradCheckReport",
    "apply", "no_grad", "check_grad", "tensor",
    "add", "sub", "mul", "scale", "shift", "add_bias", "matmul", "reduce_sum",
    "log", "relu", "leaky_relu", "sigmoid", "softmax", "clamp_min", "norm",
    "conv2d", "batchnorm", "upsample2x", "global_avg_pool", "reshape", "take_rows",
]


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_prim", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._prim: Primitive | None = None
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars route to the scalar primitives
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None) -> Tensor:
        return reduce_sum(self, axes=axes)

    def mean(self, axes=None) -> Tensor:
        total = reduce_sum(self, axes=axes)
        n = self.size // total.size
        return scale(total, 1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape=tuple(shape))

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that requires a gradient."""
        if self.size != 1:
            raise ValueError(f"backward needs a scalar output of shape (1,), got {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("output does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._prim is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._prim.backward(node._ctx, g)
            for parent, pg in zip(node._prev, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    # distance of the inputs to the nearest non-differentiable point, if any
    kink: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, forward: Callable, backward: Callable, kink: Callable | None = None) -> Primitive:
    prim = Primitive(name, forward, backward, kink)
    PRIMITIVES[name] = prim
    return prim


class Tape:
    """Ordered record of the primitives applied while the tape is active.

    Tapes nest; every active tape sees every op. ``kink_margin`` tracks how
    close any recorded input came to a non-differentiable point, which the
    gradient checker uses to reject trials that straddle a kink.
    """

    _active: list[Tape] = []

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.kink_margin = math.inf

    def __enter__(self) -> Tape:
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def evaluate(self, fn: Callable[..., Tensor], *inputs) -> Tensor:
        with self:
            return fn(*inputs)

    def backward(self, output: Tensor) -> None:
        if not self.ops:
            raise RuntimeError("backward called before any forward evaluation on this tape")
        output.backward()


_grad_enabled = [True]


@contextmanager
def no_grad() -> Iterator[None]:
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def apply(name: str, *inputs, **attrs) -> Tensor:
    prim = PRIMITIVES[name]
    ins = tuple(tensor(x) for x in inputs)
    value, ctx = prim.forward(*(t.data for t in ins), **attrs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    needs = _grad_enabled[-1] and any(t.requires_grad for t in ins)
    out.requires_grad = needs
    out._prev = ins if needs else ()
    out._prim = prim if needs else None
    out._ctx = ctx if needs else None
    if Tape._active:
        margin = prim.kink(*(t.data for t in ins), **attrs) if prim.kink else math.inf
        for tape in Tape._active:
            tape.ops.append(name)
            tape.kink_margin = min(tape.kink_margin, margin)
    return out


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _min_abs(x: np.ndarray) -> float:
    return float(np.min(np.abs(x))) if x.size else math.inf


# elementwise binary ---------------------------------------------------------

def _add_fwd(a, b):
    _same_shape("add", a, b)
    return a + b, None


register("add", _add_fwd, lambda ctx, g: (g, g))


def _sub_fwd(a, b):
    _same_shape("sub", a, b)
    return a - b, None


register("sub", _sub_fwd, lambda ctx, g: (g, -g))


def _mul_fwd(a, b):
    _same_shape("mul", a, b)
    return a * b, (a, b)


register("mul", _mul_fwd, lambda ctx, g: (g * ctx[1], g * ctx[0]))

register("scale", lambda x, c: (x * c, c), lambda c, g: (g * c,))
register("shift", lambda x, c: (x + c, None), lambda ctx, g: (g,))


def _bias_fwd(x, b):
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return x + b.reshape(bshape), axes


register("add_bias", _bias_fwd, lambda axes, g: (g, g.sum(axis=axes)))


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return a @ b, (a, b)


register("matmul", _matmul_fwd, lambda ctx, g: (g @ ctx[1].T, ctx[0].T @ g))


# reductions and shape -------------------------------------------------------

def _sum_fwd(x, axes=None):
    if axes is None:
        return np.sum(x).reshape(1), (x.shape, None)
    axes = tuple(a % x.ndim for a in axes)
    return np.sum(x, axis=axes), (x.shape, axes)


def _sum_bwd(ctx, g):
    shape, axes = ctx
    if axes is None:
        return (np.full(shape, g.reshape(-1)[0]),)
    return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)


register("reduce_sum", _sum_fwd, _sum_bwd)


def _reshape_fwd(x, shape):
    if math.prod(shape) != x.size and -1 not in shape:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape), x.shape


register("reshape", _reshape_fwd, lambda shape, g: (g.reshape(shape),))


def _take_fwd(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    return x[idx], (x.shape, idx)


def _take_bwd(ctx, g):
    shape, idx = ctx
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


register("take_rows", _take_fwd, _take_bwd)


# pointwise ------------------------------------------------------------------

def _log_fwd(x):
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return np.log(x), x


register("log", _log_fwd, lambda x, g: (g / x,))
register("relu", lambda x: (np.maximum(x, 0.0), x), lambda x, g: (g * (x > 0),),
         kink=lambda x: _min_abs(x))


def _leaky_fwd(x, slope=0.2):
    return np.where(x > 0, x, slope * x), (x, slope)


register("leaky_relu", _leaky_fwd,
         lambda ctx, g: (g * np.where(ctx[0] > 0, 1.0, ctx[1]),),
         kink=lambda x, slope=0.2: _min_abs(x))


def _sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


register("sigmoid", _sigmoid_fwd, lambda s, g: (g * s * (1.0 - s),))


def _softmax_fwd(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return s, s


register("softmax", _softmax_fwd,
         lambda s, g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def _clamp_fwd(x, lo=0.0):
    return np.maximum(x, lo), (x, lo)


register("clamp_min", _clamp_fwd, lambda ctx, g: (g * (ctx[0] > ctx[1]),),
         kink=lambda x, lo=0.0: _min_abs(x - lo))


def _norm_fwd(x):
    n = np.sqrt(np.sum(x * x, axis=-1))
    return n, (x, n)


def _norm_bwd(ctx, g):
    x, n = ctx
    safe = np.where(n > 0, n, 1.0)
    return (g[..., None] * x / safe[..., None],)


register("norm", _norm_fwd, _norm_bwd,
         kink=lambda x: float(np.min(np.sqrt(np.sum(x * x, axis=-1)))) if x.size else math.inf)


# image ops ------------------------------------------------------------------

def _conv_fwd(x, w, padding=1):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    _, _, kh, kw = w.shape
    b, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    out = np.zeros((b, w.shape[0], ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + ho, j:j + wo]
            out += np.einsum("bchw,oc->bohw", patch, w[:, :, i, j], optimize=True)
    return out, (xp, w, padding)


def _conv_bwd(ctx, g):
    xp, w, padding = ctx
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + ho, j:j + wo]
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
            gxp[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
    hp, wp = xp.shape[2], xp.shape[3]
    return gxp[:, :, padding:hp - padding, padding:wp - padding], gw


register("conv2d", _conv_fwd, _conv_bwd)


def _bn_fwd(x, gamma, beta, running_mean=None, running_var=None, training=True, eps=1e-5):
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ValueError(f"batchnorm: shape mismatch {x.shape} vs {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = np.asarray(running_mean), np.asarray(running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, gamma, inv_std, axes, shape, training)


def _bn_bwd(ctx, g):
    xhat, gamma, inv_std, axes, shape, training = ctx
    gbeta = g.sum(axis=axes)
    ggamma = (g * xhat).sum(axis=axes)
    gxhat = g * gamma.reshape(shape)
    if not training:
        return gxhat * inv_std.reshape(shape), ggamma, gbeta
    n = g.size // g.shape[1]
    gx = (inv_std.reshape(shape) / n) * (
        n * gxhat
        - gxhat.sum(axis=axes).reshape(shape)
        - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return gx, ggamma, gbeta


register("batchnorm", _bn_fwd, _bn_bwd)


def _up_fwd(x):
    if x.ndim != 4:
        raise ValueError(f"upsample2x: expected [B,C,H,W], got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def _up_bwd(shape, g):
    b, c, h, w = shape
    return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)


register("upsample2x", _up_fwd, _up_bwd)


def _gap_fwd(x):
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected [B,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def _gap_bwd(shape, g):
    hw = shape[2] * shape[3]
    return (np.broadcast_to((g / hw)[:, :, None, None], shape).copy(),)


register("global_avg_pool", _gap_fwd, _gap_bwd)


# public wrappers ------------------------------------------------------------

def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def scale(x, c: float) -> Tensor:
    return apply("scale", x, c=float(c))


def shift(x, c: float) -> Tensor:
    return apply("shift", x, c=float(c))


def add_bias(x, b) -> Tensor:
    return apply("add_bias", x, b)


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def reduce_sum(x, axes=None) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    return apply("reduce_sum", x, axes=axes)


def reshape(x, shape) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def take_rows(x, idx) -> Tensor:
    return apply("take_rows", x, idx=idx)


def log(x) -> Tensor:
    return apply("log", x)


def relu(x) -> Tensor:
    return apply("relu", x)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return apply("leaky_relu", x, slope=slope)


def sigmoid(x) -> Tensor:
    return apply("sigmoid", x)


def softmax(x) -> Tensor:
    return apply("softmax", x)


def clamp_min(x, lo: float = 0.0) -> Tensor:
    return apply("clamp_min", x, lo=float(lo))


def norm(x) -> Tensor:
    return apply("norm", x)


def conv2d(x, w, padding: int = 1) -> Tensor:
    return apply("conv2d", x, w, padding=padding)


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, training=True, eps=1e-5) -> Tensor:
    return apply("batchnorm", x, gamma, beta, running_mean=running_mean,
                 running_var=running_var, training=training, eps=eps)


def upsample2x(x) -> Tensor:
    return apply("upsample2x", x)


def global_avg_pool(x) -> Tensor:
    return apply("global_avg_pool", x)


# gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    kink_margin: float = math.inf

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __bool__(self) -> bool:
        return self.passed


def _scalarize(out: np.ndarray, weights: np.ndarray | None) -> float:
    if weights is None:
        return float(out.reshape(-1)[0])
    return float(np.sum(out * weights))


def check_grad(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central finite differences.

    Non-scalar outputs are contracted with fixed random weights. With
    ``max_coords`` only that many randomly chosen entries of each input are
    perturbed. Errors are norm-wise: ``max|a - n| / max(|a|, |n|)``.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.array(tensor(x).data), requires_grad=True) for x in inputs]
    tape = Tape()
    out = tape.evaluate(fn, *leaves)
    weights = None
    if out.size != 1:
        weights = rng.standard_normal(out.shape)
        scalar = (out * Tensor(weights)).sum()
    else:
        scalar = out
    scalar.backward()

    errors = []
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        if max_coords is not None and max_coords < flat.size:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        a = analytic.reshape(-1)[coords]
        numeric = np.empty(len(coords))
        with no_grad():
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                up = _scalarize(fn(*leaves).data, weights)
                flat[i] = orig - eps
                down = _scalarize(fn(*leaves).data, weights)
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
        denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        err = 0.0 if denom < 1e-12 else float(np.max(np.abs(a - numeric)) / denom)
        errors.append(err)
    return GradCheckReport(max(errors, default=0.0), tolerance, errors, tape.kink_margin)
