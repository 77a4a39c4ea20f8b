"""Run configuration: one JSON file plus command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .inference import GenerationConfig
from .model import ModelConfig
from .synthetic import WORLDS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# model fields that are filled in from the data, not the config file
_DERIVED_MODEL_KEYS = {"vocab_size", "pad_id", "sent_id", "eos_id", "none_id", "placeholder_offset"}


def _default_model() -> dict:
    return dict(d_model=64, n_heads=4, n_decoder_blocks=2, n_encoder_blocks=1, d_ff=128,
                K=64, D=32, tau=0.1, lambda1=1.0, lambda2=1.0, max_seq_len=256, top_p=0.9)


def _default_train() -> dict:
    return dict(batch_size=12, learning_rate=1e-3, max_steps=3000, checkpoint_every=500, log_every=10)


@dataclass
class SynthConfig:
    world: str = "four_state"
    n_train: int = 2000
    n_test: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    work_dir: str = "runs/default"
    synth: dict = field(default_factory=lambda: asdict(SynthConfig()))
    model: dict = field(default_factory=_default_model)
    train: dict = field(default_factory=_default_train)
    stage2_train: dict = field(default_factory=dict)   # overrides of ``train`` for the mention model
    generation: dict = field(default_factory=dict)

    # -- loading ----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        for k, v in d.items():
            if isinstance(getattr(base, k), dict):
                if not isinstance(v, dict):
                    raise ConfigError(f"config section {k!r} must be an object")
                merged = dict(getattr(base, k))
                merged.update(v)
                setattr(base, k, merged)
            else:
                setattr(base, k, v)
        base.validate()
        return base

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None, **flags) -> RunConfig:
        d: dict[str, Any] = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        for item in overrides or []:
            _apply_override(d, item)
        for k, v in flags.items():
            if v is not None:
                _apply_override(d, f"{k}={json.dumps(v)}")
        return cls.from_dict(d)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        _check_keys("synth", self.synth, {f.name for f in fields(SynthConfig)})
        if self.synth["world"] not in WORLDS:
            raise ConfigError(f"unknown world {self.synth['world']!r}; choose from {sorted(WORLDS)}")
        if self.synth["n_train"] < 1 or self.synth["n_test"] < 1:
            raise ConfigError("n_train and n_test must be positive")
        model_keys = {f.name for f in fields(ModelConfig)} - _DERIVED_MODEL_KEYS
        _check_keys("model", self.model, model_keys)
        train_keys = {f.name for f in fields(TrainConfig)} - {"seed", "stage"}
        _check_keys("train", self.train, train_keys)
        _check_keys("stage2_train", self.stage2_train, train_keys)
        _check_keys("generation", self.generation, {f.name for f in fields(GenerationConfig)})
        try:
            self.model_config(vocab_size=200)
            self.train_config(1)
            self.train_config(2)
            self.generation_config()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None

    # -- views ------------------------------------------------------------

    def model_config(self, vocab_size: int, stage: int = 1) -> ModelConfig:
        kw = dict(self.model)
        if stage == 2:
            kw.update(architecture="seq2seq", state_injection=False, lambda2=0.0)
        return ModelConfig(vocab_size=vocab_size, **kw)

    def train_config(self, stage: int = 1) -> TrainConfig:
        kw = dict(self.train)
        if stage == 2:
            kw.update(self.stage2_train)
        return TrainConfig(seed=self.seed, stage="state_model" if stage == 1 else "mention_model", **kw)

    def generation_config(self) -> GenerationConfig:
        kw = {"top_p": self.model.get("top_p", 0.9), "max_seq_len": self.model.get("max_seq_len", 512)}
        kw.update(self.generation)
        return GenerationConfig(**kw)

    def path(self, name: str) -> Path:
        return Path(self.work_dir) / name

    def to_dict(self) -> dict:
        return asdict(self)


def _check_keys(section: str, d: dict, allowed: set[str]) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _apply_override(d: dict, item: str) -> None:
    """``a.b=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {item!r} descends into a non-object")
    cur[parts[-1]] = value
