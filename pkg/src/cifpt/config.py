"""Run configuration: one YAML file, dotted ``key=value`` overrides, strict keys."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .data import CorpusSpec
from .evaluation import BeamConfig
from .losses import LossWeights
from .models import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TeacherConfig:
    mlm_steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15


@dataclass
class EvalConfig:
    dev_count: int = 200
    test_count: int = 200
    max_frames: int = 4000
    workers: int = 1


def _default_pretrain() -> TrainConfig:
    return TrainConfig(stage="cifpt", total_steps=4000, schedule="cifpt_trapezoid", peak_lr=1e-3, floor_lr=1e-4)


def _default_finetune() -> TrainConfig:
    return TrainConfig(stage="slu", total_steps=2000, schedule="noam", peak_lr=5e-4, warmup=100,
                       freeze_policy="frozen", loss=LossWeights(lmd_kind="none"))


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=_default_pretrain)
    finetune: TrainConfig = field(default_factory=_default_finetune)
    beam: BeamConfig = field(default_factory=BeamConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.corpus.validate()
        self.model.validate()
        self.pretrain.validate()
        self.finetune.validate()
        c, m = self.corpus, self.model
        for name in ("vocab_size", "intent_count", "slot_type_count", "frame_dim", "downsample_factor"):
            if getattr(c, name) != getattr(m, name):
                raise ConfigError(f"corpus.{name}={getattr(c, name)} disagrees with model.{name}={getattr(m, name)}")
        if m.max_len < c.len_max:
            raise ConfigError("model.max_len is shorter than the longest transcript")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every seed field set to ``seed``."""
        out = from_dict(self.to_dict())
        out.corpus.seed = out.model.seed = out.pretrain.seed = out.finetune.seed = seed
        return out


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        sub = type(default) if dataclasses.is_dataclass(default) else None
        where = f"{path}.{name}" if path else name
        kwargs[name] = _build(sub, value, where) if sub else _coerce(default, value, where)
    try:
        base = cls()
        merged = {**{f: getattr(base, f) for f in fields}, **kwargs}
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(default, value, where: str):
    # YAML 1.1 reads "1e-3" as a string; float fields accept it and plain ints
    if isinstance(default, float) and not isinstance(value, bool) and isinstance(value, (int, str)):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown key {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown key {key}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_run_config(path: str | Path | None = None, overrides: Sequence[str] = (), seed: int | None = None
                    ) -> RunConfig:
    """Defaults, then the YAML file, then ``--set`` overrides, then ``--seed``."""
    tree = RunConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(tree, loaded, "")
    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(tree, key, value)
    cfg = from_dict(tree)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg.validate()


def _merge(base: dict, upd: dict, path: str) -> None:
    for k, v in upd.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown key {where}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, where)
        else:
            base[k] = v
