"""INI-style experiment configuration with strict validation.

Sections map one-to-one onto dataclasses; unknown sections or keys are
rejected, and every value is coerced to the field's declared type.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field

from .losses import LossWeights
from .models import ModelConfig
from .sampling import SamplingConfig
from .training import RGALConfig, TrainConfig

TASKS = ("pretrain_teacher", "run_rgal", "eval", "export_embeddings")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    task: str = "run_rgal"
    out_dir: str = "runs/default"
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None
    dataset_csv: str | None = None
    eval_csv: str | None = None
    n_per_class: int = 100
    teacher_epochs: int = 200
    export_model: str = "student"
    export_layer: str = "global"
    record_triplets: bool = False
    checkpoint_every: int = 0


@dataclass
class TeacherSection:
    kind: str = "mlp_classifier"
    in_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    embedding_dim: int = 32
    num_classes: int = 3
    channels: int = 3
    size: int = 16

    def arch(self) -> dict:
        if self.kind == "mlp_classifier":
            return {"kind": self.kind, "in_dim": self.in_dim, "hidden": list(self.hidden),
                    "embedding_dim": self.embedding_dim, "num_classes": self.num_classes}
        if self.kind == "conv_classifier":
            return {"kind": self.kind, "channels": self.channels, "size": self.size,
                    "widths": list(self.hidden) + [self.embedding_dim], "num_classes": self.num_classes}
        raise ConfigError(f"teacher.kind: unknown classifier kind {self.kind!r}")


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def rgal(self) -> RGALConfig:
        return RGALConfig(self.train, self.sampling, self.loss, self.model)


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _section_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _coerce(key: str, raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if raw.strip().lower() in ("", "none", "null"):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, raw, inner[0])
    if origin is tuple:
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(_coerce(key, p, args[0]) for p in parts)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def build_config(values: dict[str, dict[str, str]]) -> ExperimentConfig:
    """Assemble and validate a config from raw ``{section: {key: text}}``."""
    built = {}
    for sec, items in values.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    for name, f in SECTIONS.items():
        cls = f.default_factory().__class__
        hints = _section_types(cls)
        kwargs = {}
        for key, raw in values.get(name, {}).items():
            if key not in hints:
                raise ConfigError(f"unknown key {name}.{key}")
            kwargs[key] = _coerce(f"{name}.{key}", raw, hints[key])
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    cfg = ExperimentConfig(**built)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    ex = cfg.experiment
    if ex.task not in TASKS:
        raise ConfigError(f"experiment.task: unknown task {ex.task!r}; choose from {TASKS}")
    if ex.task in ("run_rgal", "eval") and not ex.teacher_checkpoint:
        raise ConfigError("experiment.teacher_checkpoint: missing teacher checkpoint (required for "
                          f"task {ex.task})")
    if ex.task == "eval" and not ex.student_checkpoint:
        raise ConfigError("experiment.student_checkpoint: required for task eval")
    if ex.task == "export_embeddings":
        need = "teacher_checkpoint" if ex.export_model == "teacher" else "student_checkpoint"
        if ex.export_model not in ("teacher", "student"):
            raise ConfigError("experiment.export_model: must be 'teacher' or 'student'")
        if not getattr(ex, need) or (ex.export_model == "student" and not ex.teacher_checkpoint):
            raise ConfigError(f"experiment.{need}: required for task export_embeddings")
    if ex.export_layer not in ("global", "logits"):
        raise ConfigError("experiment.export_layer: must be 'global' or 'logits'")
    if ex.n_per_class < 2:
        raise ConfigError("experiment.n_per_class: must be >= 2")
    cfg.teacher.arch()


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse INI text, apply ``section.key`` overrides, fill defaults, validate."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        values.setdefault(sec, {})[key] = raw
    return build_config(values)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
