"""Run configuration: JSON documents with model/multires/train/data sections.

Unknown keys are rejected everywhere so a typo never silently falls back to
a default. Defaults match the reference configuration documented per module.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .multires import MultiResConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


_SECTIONS = ("model", "multires", "train", "data", "streams")
_DATA_KEYS = ("train_manifest", "val_manifest", "image_embedding")


def _from_dict(cls, doc: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' section: {unknown}")
    try:
        return cls(**doc)
    except Exception as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def multires_config_from_dict(doc: dict) -> MultiResConfig:
    return _from_dict(MultiResConfig, doc, "multires")


def model_config_from_dict(doc: dict, multires: MultiResConfig) -> ModelConfig:
    if "multires" in doc:
        raise ConfigError("pyramid geometry belongs in the top-level 'multires' section")
    names = {f.name for f in dataclasses.fields(ModelConfig)} - {"multires"}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown keys in 'model' section: {unknown}")
    try:
        return ModelConfig(multires=multires, **doc)
    except Exception as exc:
        raise ConfigError(f"invalid 'model' section: {exc}") from exc


def train_config_from_dict(doc: dict) -> TrainConfig:
    return _from_dict(TrainConfig, doc, "train")


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict

    @property
    def multires(self) -> MultiResConfig:
        return self.model.multires


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level sections: {unknown}")
    multires = multires_config_from_dict(doc.get("multires", {}))
    model = model_config_from_dict(doc.get("model", {}), multires)
    train = train_config_from_dict(doc.get("train", {}))
    data = dict(doc.get("data", {}))
    unknown_data = sorted(set(data) - set(_DATA_KEYS))
    if unknown_data:
        raise ConfigError(f"unknown keys in 'data' section: {unknown_data}")
    return RunConfig(model=model, train=train, data=data)


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def multires_config_to_dict(cfg: MultiResConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def model_config_to_dict(cfg: ModelConfig) -> dict[str, Any]:
    doc = dataclasses.asdict(cfg)
    doc.pop("multires")
    return doc


def train_config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def run_config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return {
        "model": model_config_to_dict(cfg.model),
        "multires": multires_config_to_dict(cfg.multires),
        "train": train_config_to_dict(cfg.train),
        "data": dict(cfg.data),
    }
