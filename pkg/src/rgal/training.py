"""Alternating synthesis / student training loop, optimizer and schedule."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DataPool, pool_sample
from .io import atomic_write_bytes
from .losses import (LossReport, LossWeights, embedding_match, gather_triplets, generator_total,
                     kl_adv, one_hot_loss, student_total, teacher_bn_loss, triplet_negative,
                     triplet_positive)
from .metrics import MetricsReport, batch_metrics, embeddings, grid_agreement, top1_accuracy
from .models import (ClassifierModel, GeneratorModel, ModelConfig, ProjectionHead, decode_params,
                     encode_params, frozen, projection_head)
from .optim import SGD, cosine_lr
from .sampling import SamplingConfig, draw_triplets

log = logging.getLogger(__name__)

STREAMS = ("init", "z", "synthesis", "student", "pool")


@dataclass
class TrainConfig:
    epochs: int = 200
    g_steps: int = 30
    s_steps: int = 10
    batch_size: int = 64
    lr_g: float = 0.1
    lr_s: float = 0.1
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    g_clip: float = 1.0
    s_clip: float = 1.0
    pool_capacity: int = 4096
    resample_z: bool = False
    embedding: str = "global"
    metric_space: str = "teacher"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.g_steps < 0 or self.s_steps < 0:
            raise ValueError("epoch and step counts must be non-negative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number")
        if self.lr_g <= 0 or self.lr_s <= 0 or self.lr_min < 0:
            raise ValueError("learning rates must be positive")
        if self.embedding not in ("global", "logits"):
            raise ValueError("embedding must be 'global' or 'logits'")
        if self.metric_space not in ("teacher", "student", "samples"):
            raise ValueError("metric_space must be 'teacher', 'student' or 'samples'")
        if not (self.g_clip >= 0 and self.s_clip >= 0):
            raise ValueError("g_clip and s_clip must be >= 0 (0 disables clipping)")
        if self.pool_capacity < 1:
            raise ValueError("pool_capacity must be >= 1")


@dataclass
class RGALConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SynthesisResult:
    batch: np.ndarray | None
    labels: np.ndarray | None
    loss: float
    reports: list[LossReport]


@dataclass
class RunState:
    config: RGALConfig
    teacher: ClassifierModel
    student: ClassifierModel
    head: ProjectionHead
    pool: DataPool
    rngs: dict[str, np.random.Generator]
    opt_s: SGD
    generator: GeneratorModel | None = None
    epoch: int = 0
    step: int = 0
    history: list[MetricsReport] = field(default_factory=list)
    loss_rows: list[list] = field(default_factory=list)
    triplet_rows: list[list] = field(default_factory=list)
    record_triplets: bool = False
    empty_triplet_steps: int = 0

    @classmethod
    def fresh(cls, teacher: ClassifierModel, config: RGALConfig, student: ClassifierModel | None = None) -> RunState:
        seeds = np.random.SeedSequence(config.train.seed).spawn(len(STREAMS))
        rngs = {name: np.random.default_rng(s) for name, s in zip(STREAMS, seeds)}
        if student is None:
            student = config.model.make_student(teacher, seed=int(rngs["init"].integers(2**31)))
        head = projection_head(seed=int(rngs["init"].integers(2**31)),
                               d_in=student.embedding_dim, d_out=teacher.embedding_dim)
        tc = config.train
        opt_s = SGD(student.parameters() + head.parameters(), lr=tc.lr_s,
                    momentum=tc.momentum, weight_decay=tc.weight_decay, max_grad_norm=tc.s_clip)
        return cls(config, teacher, student, head, DataPool(tc.pool_capacity), rngs, opt_s)


def _pick(out, space: str) -> Tensor:
    return out.embedding if space == "global" else out.logits


def _check_finite(report: LossReport, phase: str, epoch: int, step: int) -> None:
    if not np.isfinite(report.total):
        raise FloatingPointError(f"{phase} loss is not finite at epoch {epoch}, step {step}: {report.terms}")


def _draw(state: RunState, labels, probs, strategy: str, stream: str):
    """draw_triplets that counts empty sets on the state instead of warning each step."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        trip = draw_triplets(labels, probs, state.config.sampling, strategy, state.rngs[stream])
    if trip.warning:
        state.empty_triplet_steps += 1
    if state.record_triplets:
        state.triplet_rows += trip.rows(state.step)
    return trip


def synthesis_phase(state: RunState) -> SynthesisResult:
    """Re-initialize the generator and fit it to one latent batch for g_steps."""
    cfg = state.config
    tc, teacher, student = cfg.train, state.teacher, state.student
    gen = cfg.model.make_generator(teacher, seed=int(state.rngs["init"].integers(2**31)))
    state.generator = gen
    z = state.rngs["z"].standard_normal((tc.batch_size, gen.latent_dim))
    if tc.g_steps == 0:
        return SynthesisResult(None, None, math.inf, [])
    opt = SGD(gen.parameters(), lr=cosine_lr(state.epoch, tc.epochs, tc.lr_g, tc.lr_min),
              momentum=tc.momentum, weight_decay=tc.weight_decay, max_grad_norm=tc.g_clip)
    best = SynthesisResult(None, None, math.inf, [])
    with frozen(teacher, student):
        for j in range(tc.g_steps):
            if tc.resample_z and j > 0:
                z = state.rngs["z"].standard_normal(z.shape)
            x = gen(z, train=True)
            t = teacher.forward(x, train=False, collect_bn=True)
            s = student.forward(x, train=False)
            labels = np.argmax(t.probs.data, axis=1)
            trip = _draw(state, labels, t.probs.data, cfg.sampling.synthesis_strategy, "synthesis")
            terms = {
                "l_adv": kl_adv(t.probs, s.probs),
                "l_ntri": triplet_negative(*gather_triplets(_pick(s, tc.embedding), trip), cfg.loss.tau),
                "l_oh": one_hot_loss(t.probs),
                "l_bn": teacher_bn_loss(t.bn_stats),
            }
            report = generator_total(terms, cfg.loss)
            _check_finite(report, "synthesis", state.epoch, j)
            best.reports.append(report)
            state.loss_rows.append(report.row(state.step))
            state.step += 1
            if report.total < best.loss:
                best.batch, best.labels, best.loss = x.data.copy(), labels, report.total
            gen.zero_grad()
            if report.loss.requires_grad:
                report.loss.backward()
            opt.step()
    return best


def student_phase(state: RunState) -> list[LossReport]:
    """s_steps of student + projection-head updates on paired pool batches."""
    cfg = state.config
    tc, teacher, student, head = cfg.train, state.teacher, state.student, state.head
    if len(state.pool) == 0:
        raise ValueError("student phase needs a non-empty data pool")
    state.opt_s.lr = cosine_lr(state.epoch, tc.epochs, tc.lr_s, tc.lr_min)
    reports = []
    with frozen(teacher):
        for j in range(tc.s_steps):
            _, x, _ = pool_sample(state.pool, tc.batch_size, state.rngs["pool"])
            with ad.no_grad():
                t = teacher.forward(x, train=False)
            s = student.forward(x, train=True)
            labels = np.argmax(t.probs.data, axis=1)
            trip = _draw(state, labels, t.probs.data, cfg.sampling.student_strategy, "student")
            terms = {
                "l_adv": kl_adv(t.probs, s.probs),
                "l_tri": triplet_positive(*gather_triplets(_pick(s, tc.embedding), trip), cfg.loss.tau),
                "l_emb": embedding_match(t.embedding, s.embedding, head),
            }
            report = student_total(terms, cfg.loss)
            _check_finite(report, "student", state.epoch, j)
            reports.append(report)
            state.loss_rows.append(report.row(state.step))
            state.step += 1
            for p in state.opt_s.params:
                p.zero_grad()
            if report.loss.requires_grad:
                report.loss.backward()
            state.opt_s.step()
    return reports


def epoch_metrics(state: RunState, batch: np.ndarray | None, eval_set=None) -> MetricsReport:
    report = MetricsReport(epoch=state.epoch)
    teacher, student = state.teacher, state.student
    if eval_set is not None:
        report.top1_accuracy = top1_accuracy(student, eval_set)
    if teacher.input_shape == (2,):
        report.grid_agreement = grid_agreement(teacher, student)
    if batch is not None and len(batch) >= 2:
        labels = teacher.predict(batch)
        space = state.config.train.metric_space
        feats = batch if space == "samples" else embeddings(teacher if space == "teacher" else student, batch)
        m = batch_metrics(feats, labels)
        report.global_diversity = m["global_diversity"]
        report.intra_class_diversity = m["intra_class_diversity"]
        report.inter_class_confusion = m["inter_class_confusion"]
    return report


@dataclass
class RunResult:
    student: ClassifierModel
    head: ProjectionHead
    history: list[MetricsReport]
    loss_rows: list[list]
    state: RunState


def run_rgal(teacher: ClassifierModel, config: RGALConfig, student: ClassifierModel | None = None,
             eval_set=None, state: RunState | None = None, stop_after: int | None = None,
             on_epoch=None, record_triplets: bool = False) -> RunResult:
    """Alternate synthesis and student phases for ``config.train.epochs`` epochs.

    Only the frozen teacher and the config drive training; ``eval_set`` is a
    held-out set read solely for the per-epoch accuracy metric. Pass a
    restored ``state`` to resume; ``stop_after`` ends the run early after
    that many total epochs (used to checkpoint mid-run).
    """
    teacher.set_requires_grad(False)
    if state is None:
        state = RunState.fresh(teacher, config, student)
    state.record_triplets = record_triplets
    end = config.train.epochs if stop_after is None else min(stop_after, config.train.epochs)
    while state.epoch < end:
        syn = synthesis_phase(state)
        if syn.batch is not None:
            state.pool.update(syn.batch, syn.labels, syn.loss)
        student_phase(state)
        metrics = epoch_metrics(state, syn.batch, eval_set)
        state.history.append(metrics)
        log.info("epoch %d agreement=%s acc=%s", state.epoch, metrics.grid_agreement, metrics.top1_accuracy)
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state, metrics)
    return RunResult(state.student, state.head, state.history, state.loss_rows, state)


# checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"RGAL-CKPT\n"


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, state: RunState) -> None:
    """Text metadata header line, then every array in the model binary format."""
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.config.train.seed,
        "config_hash": state.config.digest(),
        "rngs": {k: _rng_state(g) for k, g in state.rngs.items()},
        "pool_inserted": state.pool.inserted,
        "history": [m.as_dict() for m in state.history],
        "loss_rows": state.loss_rows,
        "empty_triplet_steps": state.empty_triplet_steps,
    }
    arrays = {f"student.{k}": v for k, v in state.student.state_dict().items()}
    arrays.update({f"head.{k}": v for k, v in state.head.state_dict().items()})
    arrays.update({f"velocity.{i}": v for i, v in enumerate(state.opt_s.velocity)})
    arrays.update(state.pool.state())
    header = json.dumps(meta, sort_keys=True).encode() + b"\n"
    atomic_write_bytes(Path(path), CKPT_MAGIC + header + encode_params(arrays))


def load_checkpoint(path, teacher: ClassifierModel, config: RGALConfig) -> RunState:
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not an RGAL checkpoint")
    rest = blob[len(CKPT_MAGIC):]
    nl = rest.index(b"\n")
    meta = json.loads(rest[:nl])
    if meta["config_hash"] != config.digest():
        raise ValueError("checkpoint was written with a different configuration")
    arrays = decode_params(rest[nl + 1:])
    state = RunState.fresh(teacher, config)
    state.student.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("student.")})
    state.head.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("head.")})
    state.opt_s.velocity = [arrays[f"velocity.{i}"] for i in range(len(state.opt_s.velocity))]
    state.pool = DataPool.from_state(config.train.pool_capacity, meta["pool_inserted"], arrays)
    state.rngs = {k: _restore_rng(v) for k, v in meta["rngs"].items()}
    state.epoch, state.step = meta["epoch"], meta["step"]
    state.history = [MetricsReport(**m) for m in meta["history"]]
    state.loss_rows = meta["loss_rows"]
    state.empty_triplet_steps = meta.get("empty_triplet_steps", 0)
    return state
