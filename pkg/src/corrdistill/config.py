"""Flat ``key = value`` run configuration.

Every key has a default; unknown keys are rejected and ``#`` starts a comment.
Keys
----
Training: setup, loss, teacher_mode, gamma, lambda_cc, lambda_sc, heuristic,
normalization, bt_lambda, steps, batch_size, learning_rate, seed,
dev_eval_every, non_additive_prob, additive_kinds, non_additive_kinds,
n_mels, frame_ms, hop_ms.
Encoders: model_dim, n_heads, mlp_dim, teacher_blocks, student_blocks,
teacher_seed, head_init.
Forest: n_trees, max_depth, max_features (0 = ceil(sqrt(D))), forest_seed.
Corpus: corpus_size, dev_size, probe_size, utterance_s, sample_rate, corpus_seed.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import ConfigError
from .models import EncoderConfig
from .probe import ForestConfig
from .trainer import TrainingConfig

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # training
    setup: str = "both"
    loss: str = "cl"
    teacher_mode: str = "variant"
    gamma: float = 1.0
    lambda_cc: float = 5e-5
    lambda_sc: float = 5e-6
    heuristic: bool = False
    normalization: str = "standardize"
    bt_lambda: float = 5e-3
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    dev_eval_every: int = 200
    non_additive_prob: float = 0.5
    additive_kinds: str = "gaussian,white,pink,babble"
    non_additive_kinds: str = "reverb,pitch_shift,band_reject"
    n_mels: int = 40
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    # encoders
    model_dim: int = 32
    n_heads: int = 4
    mlp_dim: int = 64
    teacher_blocks: int = 12
    student_blocks: int = 2
    teacher_seed: int = 0
    head_init: str = "uniform"
    # probe forest
    n_trees: int = 100
    max_depth: int = 8
    max_features: int = 0
    forest_seed: int = 0
    # corpus
    corpus_size: int = 256
    dev_size: int = 32
    probe_size: int = 40
    utterance_s: float = 1.0
    sample_rate: int = 16000
    corpus_seed: int = 0

    def training(self) -> TrainingConfig:
        names = {f.name for f in fields(TrainingConfig)}
        return TrainingConfig(**{k: v for k, v in self.__dict__.items() if k in names})

    def teacher_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.n_mels, model_dim=self.model_dim, n_blocks=self.teacher_blocks,
            n_heads=self.n_heads, mlp_dim=self.mlp_dim, seed=self.teacher_seed,
        )

    def forest(self) -> ForestConfig:
        return ForestConfig(self.n_trees, self.max_depth, self.max_features, self.forest_seed)

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in self.__dict__.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        try:
            cfg = cls(**kwargs)
            cfg.training()
            cfg.teacher_config()
            cfg.forest()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw, type_name: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if type_name == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (e.g. CLI flags)."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_mapping(values)
