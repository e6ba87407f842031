"""YAML run configs: schema validation, overrides and resolution into the
typed config objects."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import yaml

from .core import ConfigError, FrameSpec, ModelConfig, SeedSpec
from .datagen import DatasetSpec, PerturbationSpec
from .harness import TrainConfig

DEVICE_ENV = "MINISTL_DEVICE"
MODEL_KEYS = ("hid_S", "hid_T", "N_S", "N_T", "mlp_ratio", "num_layers", "num_hidden", "filter_size")


def schema() -> dict:
    return json.loads(resources.files("ministl").joinpath("config.schema.json").read_text())


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config key '{where}': {e.message}")


def load_raw(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    validate(raw)
    return raw


def apply_overrides(raw: dict, seed=None, device=None, epochs=None, out=None) -> dict:
    raw = copy.deepcopy(raw)
    train = raw.setdefault("train", {})
    if os.environ.get(DEVICE_ENV):
        train["device"] = os.environ[DEVICE_ENV]
    if seed is not None:
        train["seed"] = seed
    if device is not None:
        train["device"] = device
    if epochs is not None:
        train["epochs"] = epochs
    if out is not None:
        raw["out"] = out
    validate(raw)
    return raw


@dataclass
class ResolvedConfig:
    train: TrainConfig
    perturbations: list
    suite: list
    out: str
    raw: dict

    def plan(self) -> dict:
        return {"train": self.train.to_dict(), "config_hash": self.train.hash(),
                "perturbations": [p.to_dict() for p in self.perturbations],
                "suite": [{"name": n, **o} for n, o in self.suite], "out": self.out,
                "eval": self.raw.get("eval", {}), "report": self.raw.get("report", {})}


def _perturbation(d: dict) -> PerturbationSpec:
    d = dict(d)
    seed = d.pop("seed", 0)
    return PerturbationSpec(seed=SeedSpec(seed, 0), **d)


def dataset_spec(raw: dict, split: str = "train") -> DatasetSpec:
    d = dict(raw.get("dataset", {}))
    d.pop("test_count", None)
    variant = d.pop("variant", "mnist")
    h, w = d.pop("height", 64), d.pop("width", 64)
    seed = d.pop("seed", 42)
    if "speed_range" in d:
        d["speed_range"] = tuple(d["speed_range"])
    fs = FrameSpec(3 if variant == "mnist_cifar" else 1, h, w)
    return DatasetSpec(variant=variant, split=split, frame_spec=fs, seed=SeedSpec(seed, 0), **d)


def resolve(raw: dict) -> ResolvedConfig:
    m = dict(raw.get("model", {}))
    name = m.pop("name", "metavp-gated_attention")
    model = ModelConfig(**{k: v for k, v in m.items() if k in MODEL_KEYS})
    t = dict(raw.get("train", {}))
    seed = t.pop("seed", 0)
    train = TrainConfig(model_name=name, model=model, dataset=dataset_spec(raw),
                        test_count=raw.get("dataset", {}).get("test_count", 10_000),
                        perturbation=_perturbation(raw["perturbation"]) if raw.get("perturbation") else None,
                        seed=SeedSpec(seed, 0), **t)
    train.resolved_model()  # registry / compatibility check
    perts = [_perturbation(p) for p in raw.get("perturbations", [])]
    suite = []
    for entry in raw.get("suite", []):
        e = dict(entry)
        suite.append((e.pop("name"), e))
    return ResolvedConfig(train, perts, suite, raw.get("out", "runs"), raw)


def load(path, **overrides) -> ResolvedConfig:
    return resolve(apply_overrides(load_raw(path), **overrides))
