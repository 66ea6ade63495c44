"""Experiment configuration: defaults, YAML files, dotted overrides.

The configuration is the existing dataclasses grouped into one tree; files
and ``section.key=value`` override strings modify a default instance rather
than replace it, so a config file only needs the keys it changes. Unknown
keys are rejected by full path. ``config_hash`` digests the canonical JSON
form, giving outputs a stable fingerprint of every setting that produced
them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .pointops import PerturbationConfig
from .synth import SceneConfig
from .toy.model import ToyModelConfig


@dataclass
class TrainConfig:
    n_train: int = 200
    n_eval: int = 50
    data_seed: int = 0
    epochs: int = 30
    lr: float = 0.004
    weight_decay: float = 0.001
    batch_size: int = 4
    seed: int = 0
    iou_thresh: float = 0.25
    bev: bool = False


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def to_dict(cfg) -> dict:
    """Nested plain-type view (tuples become lists), fit for YAML or JSON."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(current, value, path):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise TypeError(f"{path}: expected a boolean, got {value!r}")
    return value


def _merge(obj, updates: dict, path: str):
    if not isinstance(updates, dict):
        raise TypeError(f"{path or 'config'}: expected a mapping, got {updates!r}")
    known = {f.name for f in fields(obj)}
    values = {}
    for key, val in updates.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise KeyError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if is_dataclass(current) and not isinstance(current, type):
            values[key] = _merge(current, val, where)
        else:
            values[key] = _coerce(current, val, where)
    return dataclasses.replace(obj, **values)


def from_dict(updates: dict | None) -> ExperimentConfig:
    cfg = default_config()
    if updates:
        cfg = _merge(cfg, updates, "")
    cfg.model.validate()
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Defaults, optionally overlaid with a YAML file."""
    if path is None:
        return default_config()
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    return from_dict(doc)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values parse as YAML scalars."""
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not of the form key=value")
        value = yaml.safe_load(raw)
        node: dict = {}
        leaf = node
        parts = key.split(".")
        for p in parts[:-1]:
            leaf = leaf.setdefault(p, {})
        leaf[parts[-1]] = value
        cfg = _merge(cfg, node, "")
    cfg.model.validate()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical JSON form of the full configuration."""
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
