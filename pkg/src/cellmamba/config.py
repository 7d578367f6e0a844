"""TOML run configuration.

Sections and keys (all optional)::

    [model]   preset = "micro" | "full", then any ModelConfig field
    [train]   any TrainConfig field
    [loss]    any LossConfig field
    [eval]    any EvalConfig field
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .inference import EvalConfig
from .losses import LossConfig
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("model", "train", "loss", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.micro)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _checked(cls, section: str, values: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {unknown}")
    return values


def parse_config(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    model_doc = dict(doc.get("model", {}))
    preset = model_doc.pop("preset", "micro")
    if preset not in ("micro", "full"):
        raise ConfigError(f"unknown model preset {preset!r}")
    try:
        model = getattr(ModelConfig, preset)(**_checked(ModelConfig, "model", model_doc))
        train_doc = dict(doc.get("train", {}))
        train_doc.setdefault("warmup_epochs", model.warmup_epochs)
        train = TrainConfig(**_checked(TrainConfig, "train", train_doc))
        loss = LossConfig(**_checked(LossConfig, "loss", dict(doc.get("loss", {}))))
        evaluation = EvalConfig(**_checked(EvalConfig, "eval", dict(doc.get("eval", {}))))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if train.warmup_epochs != model.warmup_epochs:
        model = ModelConfig.from_dict({**model.to_dict(), "warmup_epochs": train.warmup_epochs})
    return RunConfig(model, train, loss, evaluation)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)
