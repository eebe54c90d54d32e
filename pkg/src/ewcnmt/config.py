"""Run configuration: a nested YAML document with every default spelled out.

Sections mirror the pipeline stages. Unknown keys anywhere are rejected, and
each command writes the fully resolved document next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, get_type_hints

import yaml

from .errors import ConfigError
from .optim import Schedule
from .training import TrainSettings
from .transformer import ModelConfig


@dataclass(frozen=True)
class ModelSection:
    """Architecture; vocabulary sizes come from the subword models."""

    enc_layers: int = 1
    dec_layers: int = 3
    model_dim: int = 32
    ff_dim: int = 64
    heads: int = 4
    dropout: float = 0.1
    tie_tgt_embeddings: bool = True

    def build(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **dataclasses.asdict(self))


@dataclass(frozen=True)
class ScheduleSection:
    base_lr: float = 3e-3
    warmup: int = 200
    decay: float = 0.9


@dataclass(frozen=True)
class TrainSection:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    clip_norm: float = 1.0
    token_budget: int = 512
    bucket_width: int = 8
    max_steps: int = 2500
    eval_every: int = 100
    keep_best: int = 4

    def build(self) -> TrainSettings:
        d = dataclasses.asdict(self)
        d["schedule"] = Schedule(**d["schedule"])
        return TrainSettings(**d)


@dataclass(frozen=True)
class DataSection:
    src_bpe: str | None = None
    tgt_bpe: str | None = None
    train_src: str | None = None
    train_tgt: str | None = None
    dev_src: str | None = None
    dev_tgt: str | None = None
    test_src: str | None = None
    test_tgt: str | None = None
    mono_src: str | None = None
    mono_tgt: str | None = None
    held_out_src: str | None = None
    held_out_tgt: str | None = None


@dataclass(frozen=True)
class BPESection:
    vocab_size: int = 300
    min_frequency: int = 2


@dataclass(frozen=True)
class LMSection:
    side: str = "tgt"
    layers: int = 3
    max_steps: int = 1500
    eval_every: int = 250


@dataclass(frozen=True)
class TransferSection:
    src_lm: str | None = None
    src_layers: int | None = None
    tgt_lm: str | None = None
    tgt_layers: int | None = None


@dataclass(frozen=True)
class RegSection:
    kind: str = "none"
    fisher: tuple[str, ...] = ()
    lambda_src: float = 0.3
    lambda_tgt: float = 0.3
    lm_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "ewc", "lm_objective"):
            raise ConfigError(f"reg.kind must be none, ewc or lm_objective, got {self.kind!r}")


@dataclass(frozen=True)
class DecodeSection:
    beam_size: int = 8
    alpha: float = 1.0


@dataclass(frozen=True)
class ExperimentSection:
    depths: tuple[int, ...] = (1, 2, 3)
    sweep_enc_layers: int = 3
    sweep_dec_layers: int = 1
    sweep_lambda: float = 0.3
    cost_rounds: int = 5
    cost_steps: int = 120


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    bpe: BPESection = field(default_factory=BPESection)
    lm: LMSection = field(default_factory=LMSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    reg: RegSection = field(default_factory=RegSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    seed: int = 0
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides; ``None`` values are skipped."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = d
            *path, leaf = dotted.split(".")
            for key in path:
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return from_dict(RunConfig, d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def from_dict(cls, data: Mapping | None, where: str = ""):
    """Build dataclass ``cls`` from nested mappings, rejecting unknown keys."""
    data = dict(data or {})
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys in {where or 'top level'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {where + name!r} must be a mapping")
            kwargs[name] = from_dict(hint, value, f"{where}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config in {where or 'top level'}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return from_dict(RunConfig, data)


def write_resolved(config: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved-config"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.dumps(), encoding="utf-8")
    return path
