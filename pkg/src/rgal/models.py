"""Classifiers, generators and the embedding projection head."""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .io import atomic_write_bytes

MAGIC = b"RGAL"
FORMAT_VERSION = 1


class Layer:
    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(gain / n_in), (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor, run: RunMode) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"Linear: expected [B, {self.weight.shape[0]}], got {x.shape}")
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3, gain: float = 2.0):
        fan_in = c_in * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), (c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = k // 2

    def __call__(self, x, run):
        return ad.add_bias(ad.conv2d(x, self.weight, padding=self.padding), self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1).

    In training mode the output uses batch statistics and the running
    statistics move with ``momentum``; in evaluation mode the running
    statistics are used and never change.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, run):
        if run.bn_stats is not None:
            run.bn_stats.append((channel_moments(x), (self.running_mean.copy(), self.running_var.copy())))
        if run.train and run.update_stats:
            axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=axes)
            self.running_var = (1 - m) * self.running_var + m * x.data.var(axis=axes)
        return ad.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=run.train, eps=self.eps)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Act(Layer):
    def __init__(self, kind: str):
        self.kind = kind

    def __call__(self, x, run):
        if self.kind == "relu":
            return ad.relu(x)
        if self.kind == "leaky_relu":
            return ad.leaky_relu(x, 0.2)
        if self.kind == "sigmoid":
            return ad.sigmoid(x)
        raise ValueError(f"unknown activation {self.kind!r}")


class Reshape(Layer):
    def __init__(self, *shape: int):
        self.shape = shape

    def __call__(self, x, run):
        return ad.reshape(x, (x.shape[0],) + self.shape)


class Upsample(Layer):
    def __call__(self, x, run):
        return ad.upsample2x(x)


class Affine(Layer):
    """Fixed elementwise map x -> a*x + b (no parameters)."""

    def __init__(self, a: float, b: float):
        self.a, self.b = a, b

    def __call__(self, x, run):
        return ad.shift(ad.scale(x, self.a), self.b)


class GlobalPool(Layer):
    def __call__(self, x, run):
        return ad.global_avg_pool(x)


def channel_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable per-channel batch mean and (biased) variance."""
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    n = x.size // x.shape[1]
    mean = ad.scale(ad.reduce_sum(x, axes), 1.0 / n)
    centered = ad.add_bias(x, ad.scale(mean, -1.0))
    var = ad.scale(ad.reduce_sum(ad.mul(centered, centered), axes), 1.0 / n)
    return mean, var


@dataclass
class RunMode:
    train: bool = False
    bn_stats: list | None = None
    update_stats: bool = True


class Model:
    """A named, ordered stack of layers."""

    layers: list[Layer]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layers.{i}.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_params().items()}
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers().items():
                state[f"layers.{i}.{k}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        for name, tensor in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != tensor.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {tensor.shape}")
            tensor.data = np.array(state[name], dtype=np.float64)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(state[f"layers.{i}.running_mean"], dtype=np.float64)
                layer.running_var = np.array(state[f"layers.{i}.running_var"], dtype=np.float64)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _run(self, x: Tensor, run: RunMode) -> Tensor:
        for layer in self.layers:
            x = layer(x, run)
        return x


@contextmanager
def frozen(*models: Model):
    """Temporarily stop parameter gradients for ``models``."""
    saved = [[p.requires_grad for p in m.parameters()] for m in models]
    for m in models:
        m.set_requires_grad(False)
    try:
        yield
    finally:
        for m, flags in zip(models, saved):
            for p, f in zip(m.parameters(), flags):
                p.requires_grad = f


@dataclass
class ClassifierOutput:
    logits: Tensor
    probs: Tensor
    embedding: Tensor
    bn_stats: list = field(default_factory=list)


class ClassifierModel(Model):
    """Feature extractor followed by a linear classifier head.

    The embedding is the feature vector right before the head (the pooled
    feature for convolutional models).
    """

    def __init__(self, features: list[Layer], head: Linear, input_shape: tuple[int, ...],
                 embedding_dim: int, num_classes: int, arch: dict):
        self.layers = features + [head]
        self.input_shape = tuple(input_shape)
        self.embedding_dim = embedding_dim
        self.num_classes = num_classes
        self.arch = arch

    def forward(self, x, train: bool = False, collect_bn: bool = False,
                update_stats: bool = True) -> ClassifierOutput:
        """``update_stats=False`` normalizes with batch statistics in training
        mode but leaves the running statistics untouched (frozen teacher)."""
        x = ad.tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"classifier expects [B, {self.input_shape}], got {x.shape}")
        run = RunMode(train=train, bn_stats=[] if collect_bn else None, update_stats=update_stats)
        h = x
        for layer in self.layers[:-1]:
            h = layer(h, run)
        logits = self.layers[-1](h, run)
        return ClassifierOutput(logits, ad.softmax(logits), h, run.bn_stats or [])

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(x).logits.data, axis=1)


class GeneratorModel(Model):
    def __init__(self, layers: list[Layer], latent_dim: int, output_shape: tuple[int, ...], arch: dict):
        self.layers = layers
        self.latent_dim = latent_dim
        self.output_shape = tuple(output_shape)
        self.arch = arch

    def forward(self, z, train: bool = True) -> Tensor:
        z = ad.tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"generator expects [B, {self.latent_dim}], got {z.shape}")
        return self._run(z, RunMode(train=train))

    __call__ = forward


class ProjectionHead(Model):
    """Fully connected map from student to teacher embedding space."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, identity: bool = False):
        fc = Linear(d_in, d_out, rng, gain=1.0)
        if identity:
            if d_in != d_out:
                raise ValueError("identity init needs equal dimensions")
            fc.weight.data = np.eye(d_in)
        self.layers = [fc]
        self.d_in, self.d_out = d_in, d_out
        self.arch = {"kind": "projection", "d_in": d_in, "d_out": d_out}

    def forward(self, e_s) -> Tensor:
        e_s = ad.tensor(e_s)
        if e_s.data.ndim != 2 or e_s.shape[1] != self.d_in:
            raise ValueError(f"projection expects [B, {self.d_in}], got {e_s.shape}")
        return self.layers[0](e_s, RunMode())

    __call__ = forward


def mlp_classifier(seed: int = 0, in_dim: int = 2, hidden: tuple[int, ...] = (64, 64),
                   embedding_dim: int = 32, num_classes: int = 3) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    width = in_dim
    for h in tuple(hidden) + (embedding_dim,):
        layers += [Linear(width, h, rng), BatchNorm(h), Act("relu")]
        width = h
    head = Linear(embedding_dim, num_classes, rng, gain=1.0)
    arch = {"kind": "mlp_classifier", "in_dim": in_dim, "hidden": list(hidden),
            "embedding_dim": embedding_dim, "num_classes": num_classes}
    return ClassifierModel(layers, head, (in_dim,), embedding_dim, num_classes, arch)


def conv_classifier(seed: int = 0, channels: int = 3, size: int = 16, widths: tuple[int, ...] = (16, 32),
                    num_classes: int = 3) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    c = channels
    for w in widths:
        layers += [Conv2d(c, w, rng), BatchNorm(w), Act("relu")]
        c = w
    layers.append(GlobalPool())
    head = Linear(c, num_classes, rng, gain=1.0)
    arch = {"kind": "conv_classifier", "channels": channels, "size": size,
            "widths": list(widths), "num_classes": num_classes}
    return ClassifierModel(layers, head, (channels, size, size), c, num_classes, arch)


def mlp_generator(seed: int = 0, latent_dim: int = 16, hidden: tuple[int, ...] = (64, 64),
                  out_dim: int = 2, bound: float = 3.0) -> GeneratorModel:
    """MLP generator whose sigmoid output is stretched to the box [-bound, bound]."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    width = latent_dim
    for h in hidden:
        layers += [Linear(width, h, rng), BatchNorm(h), Act("leaky_relu")]
        width = h
    layers += [Linear(width, out_dim, rng, gain=1.0), Act("sigmoid"), Affine(2.0 * bound, -bound)]
    arch = {"kind": "mlp_generator", "latent_dim": latent_dim, "hidden": list(hidden),
            "out_dim": out_dim, "bound": bound}
    return GeneratorModel(layers, latent_dim, (out_dim,), arch)


def conv_generator(seed: int = 0, latent_dim: int = 256, width: int = 32, height: int = 32) -> GeneratorModel:
    if width % 4 or height % 4:
        raise ValueError(f"generator output {width}x{height} must be divisible by 4")
    if latent_dim % 2:
        raise ValueError("latent_dim must be even")
    rng = np.random.default_rng(seed)
    half = latent_dim // 2
    h4, w4 = height // 4, width // 4
    layers: list[Layer] = [
        Linear(latent_dim, h4 * w4 * half, rng, gain=1.0),
        Reshape(half, h4, w4),
        BatchNorm(half),
        Upsample(),
        Conv2d(half, latent_dim, rng), BatchNorm(latent_dim), Act("leaky_relu"),
        Upsample(),
        Conv2d(latent_dim, half, rng), BatchNorm(half), Act("leaky_relu"),
        Conv2d(half, 3, rng, gain=1.0), Act("sigmoid"),
    ]
    arch = {"kind": "conv_generator", "latent_dim": latent_dim, "width": width, "height": height}
    return GeneratorModel(layers, latent_dim, (3, height, width), arch)


def projection_head(seed: int = 0, d_in: int = 32, d_out: int = 32, identity: bool = False) -> ProjectionHead:
    return ProjectionHead(d_in, d_out, np.random.default_rng(seed), identity=identity)


BUILDERS = {
    "mlp_classifier": mlp_classifier,
    "conv_classifier": conv_classifier,
    "mlp_generator": mlp_generator,
    "conv_generator": conv_generator,
    "projection": projection_head,
}


def init_model(kind: str, seed: int = 0, **arch) -> Model:
    """Build a freshly initialized model of ``kind`` (fan-in scaled normal weights)."""
    if kind not in BUILDERS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(BUILDERS)}")
    return BUILDERS[kind](seed=seed, **arch)


def classifier_forward(model: ClassifierModel, x, train: bool = False) -> ClassifierOutput:
    return model.forward(x, train=train)


def generator_forward(gen: GeneratorModel, z, train: bool = True) -> Tensor:
    return gen.forward(z, train=train)


def projection_forward(head: ProjectionHead, e_s) -> Tensor:
    return head.forward(e_s)


# binary parameter files -----------------------------------------------------

def encode_params(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not an RGAL parameter file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError("trailing bytes in parameter file")
    return state


def save_params(path, state: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(Path(path), encode_params(state))


def load_params(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


@dataclass
class ModelConfig:
    """Architecture of the student and generator built for a distillation run."""

    student_hidden: tuple[int, ...] = (64, 64)
    student_embedding_dim: int = 32
    generator: str = "mlp_generator"
    latent_dim: int = 16
    generator_hidden: tuple[int, ...] = (64, 64)
    image_size: int = 16

    def make_student(self, teacher: ClassifierModel, seed: int) -> ClassifierModel:
        arch = teacher.arch
        if arch["kind"] == "mlp_classifier":
            return mlp_classifier(seed=seed, in_dim=arch["in_dim"], hidden=tuple(self.student_hidden),
                                  embedding_dim=self.student_embedding_dim, num_classes=arch["num_classes"])
        if arch["kind"] == "conv_classifier":
            widths = tuple(self.student_hidden[:-1]) + (self.student_embedding_dim,)
            return conv_classifier(seed=seed, channels=arch["channels"], size=arch["size"],
                                   widths=widths, num_classes=arch["num_classes"])
        raise ValueError(f"cannot derive a student for teacher kind {arch['kind']!r}")

    def make_generator(self, teacher: ClassifierModel, seed: int) -> GeneratorModel:
        if self.generator == "mlp_generator":
            return mlp_generator(seed=seed, latent_dim=self.latent_dim, hidden=tuple(self.generator_hidden),
                                 out_dim=teacher.input_shape[0])
        if self.generator == "conv_generator":
            _, h, w = teacher.input_shape
            return conv_generator(seed=seed, latent_dim=self.latent_dim, width=w, height=h)
        raise ValueError(f"unknown generator {self.generator!r}")


def build_classifier(arch: dict, seed: int = 0) -> ClassifierModel:
    """Rebuild a classifier from its ``arch`` descriptor."""
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in arch.items() if k != "kind"}
    return init_model(arch["kind"], seed=seed, **kw)
