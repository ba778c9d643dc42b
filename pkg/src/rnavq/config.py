"""Run configuration: one YAML file with a section per component.

Unknown keys are rejected so typos fail loudly. Command-line flags
(``--seed``, ``--out``) override the file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .flow import SamplerConfig
from .fsq import FsqConfig
from .invfold import SWEEP_TEMPERATURES, InvFoldConfig, InvFoldTrainConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    pdb: list[str] = field(default_factory=list)
    synthetic: int = 32
    min_len: int = 20
    max_len: int = 40
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        if not self.pdb and self.synthetic < 1:
            raise ConfigError("data: give PDB inputs or a positive synthetic count")
        if not 4 <= self.min_len <= self.max_len:
            raise ConfigError("data: need 4 <= min_len <= max_len")


@dataclass
class AnalysisConfig:
    ngram_sizes: tuple[int, ...] = (5, 7)
    top_k: int = 20
    smoothing: float = 1.0
    dotbracket: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    invfold: InvFoldConfig = field(default_factory=InvFoldConfig)
    invfold_train: InvFoldTrainConfig = field(default_factory=InvFoldTrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    sweep_temperatures: tuple[float, ...] = SWEEP_TEMPERATURES
    sweep_samples: int = 16
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> None:
        try:
            self.model.validate()
            FsqConfig(tuple(self.model.levels))
            self.train.validate()
            self.sampler.validate()
            self.invfold.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.data.validate()
        if self.sweep_samples < 1:
            raise ConfigError("sweep_samples must be >= 1")

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.train.seed = seed
        self.invfold_train.seed = seed
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    template = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(template, name)
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, key)
        elif isinstance(default, tuple) and value is not None:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    cfg.model.levels = tuple(cfg.model.levels)
    return cfg.with_seed(cfg.seed)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().with_seed(0)
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(data or {})


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def toy_config() -> RunConfig:
    """Small model used by the smoke tests and toy experiments."""
    from .encoder import EncoderConfig
    from .flow import DecoderConfig
    cfg = RunConfig()
    cfg.model = ModelConfig("A10", EncoderConfig(layers=2, hidden_dim=64, heads=8, pair_dim=32),
                            DecoderConfig(layers=4, hidden_dim=64, heads=8, pair_dim=32), (8, 6, 5))
    # the encoder sees centred absolute coordinates, so rotation augmentation
    # slows the overfit considerably
    cfg.train = TrainConfig(steps=2000, lr=1e-3, min_lr=5e-5, warmup=50, augment_rotation=False)
    return cfg
