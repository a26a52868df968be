"""Run configuration: one JSON document, schema-checked, with CLI overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from . import __version__
from .errors import ConfigError
from .objectives import ContrastiveConfig, Mode, OrdinalTargetConfig
from .trainer import TrainConfig

CACHE_ENV = "MUSICMOS_CACHE"

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["manifest"],
    "properties": {
        "manifest": {"type": "string"},
        "encoder": {"type": "string"},
        "encoder_layer": _int,
        "weights_root": {"type": ["string", "null"]},
        "mode": {"enum": [m.value for m in Mode]},
        "output_root": {"type": "string"},
        "cache_root": {"type": ["string", "null"]},
        "audio": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"sample_rate": _pos_int, "seconds": {"type": "number", "exclusiveMinimum": 0}},
        },
        "folds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_folds": {"type": "integer", "minimum": 2},
                "seed": _int,
                "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr_heads": {"type": "number", "exclusiveMinimum": 0},
                "lr_lora": {"type": "number", "exclusiveMinimum": 0},
                "lr_encoder": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay_heads": {"type": "number", "minimum": 0},
                "weight_decay_lora": {"type": "number", "minimum": 0},
                "batch_size": _pos_int,
                "max_epochs": {"type": "integer", "minimum": 0},
                "patience": _pos_int,
                "grad_clip_norm": {"type": "number", "exclusiveMinimum": 0},
                "precision": {"enum": ["f32", "mixed-bf16"]},
                "seed": _int,
                "lora_rank": _pos_int,
                "lora_alpha": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "ordinal": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "centers": {"type": "array", "items": _num, "minItems": 2},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "contrastive": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "margin": {"type": "number", "exclusiveMinimum": 0},
                "weight": {"type": "number", "minimum": 0},
                "warm_start_epoch": _pos_int,
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bootstrap_B": {"type": "integer", "minimum": 0},
                "bootstrap_seed": _int,
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "steiger_reference": {"enum": [m.value for m in Mode]},
            },
        },
        "degradation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"seed": _int, "mode": {"enum": [m.value for m in Mode]}},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modes": {"type": "array", "items": {"enum": [m.value for m in Mode]}},
                "sizes": {"type": "array", "items": {"anyOf": [_pos_int, {"const": "full"}]}},
                "seed": _int,
            },
        },
    },
}

DEFAULTS: dict = {
    "encoder": "muq-310m",
    "encoder_layer": -1,
    "weights_root": None,
    "mode": "A1",
    "output_root": "runs",
    "cache_root": None,
    "audio": {"sample_rate": 24000, "seconds": 10.0},
    "folds": {"n_folds": 5, "seed": 42, "val_fraction": 0.15},
    "train": {},
    "ordinal": {"centers": [1.0, 2.0, 3.0, 4.0, 5.0], "sigma": 0.5},
    "contrastive": {"margin": 0.5, "weight": 0.5, "warm_start_epoch": 6},
    "evaluation": {"bootstrap_B": 1000, "bootstrap_seed": 42, "alpha": 0.05, "steiger_reference": "A3c"},
    "degradation": {"seed": 0, "mode": "A3b"},
    "sweep": {"modes": ["A1", "A3a"], "sizes": [100, 150, 250, 500, 750, 1000, "full"], "seed": 0},
}

# keys that only say where things go, not what is computed
_LOCATION_KEYS = ("output_root", "cache_root", "weights_root", "mode")


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: Mapping) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str | Path = ".") -> "RunConfig":
        validate(doc)
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir))
        cfg.train_config()  # surface cross-field errors before any work
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping | None = None) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if overrides:
            doc = _merge(doc, overrides)
        return cls.from_dict(doc, path.parent)

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def with_overrides(self, overrides: Mapping) -> "RunConfig":
        doc = _merge(self.data, overrides)
        return RunConfig.from_dict(doc, self.base_dir)

    def _path(self, value: str) -> Path:
        p = Path(value).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def manifest(self) -> Path:
        return self._path(self.data["manifest"])

    @property
    def output_root(self) -> Path:
        return self._path(self.data["output_root"])

    @property
    def cache_root(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        if self.data["cache_root"]:
            return self._path(self.data["cache_root"])
        return self.output_root / "cache"

    @property
    def mode(self) -> Mode:
        return Mode.parse(self.data["mode"])

    @property
    def seed(self) -> int:
        return int(self.data["train"].get("seed", 0))

    def train_config(self, mode: str | Mode | None = None) -> TrainConfig:
        mode = Mode.parse(mode or self.data["mode"])
        try:
            return TrainConfig(
                mode=mode.value,
                ordinal=OrdinalTargetConfig(tuple(self.data["ordinal"]["centers"]), self.data["ordinal"]["sigma"]),
                contrastive=ContrastiveConfig(**self.data["contrastive"]),
                **self.data["train"],
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def encoder_id(self, mode: str | Mode | None = None) -> str:
        """A4 swaps in the alternative encoder unless the config names a toy one."""
        mode = Mode.parse(mode or self.data["mode"])
        enc = self.data["encoder"]
        if mode is Mode.A4 and not enc.startswith("toy"):
            return "mert-95m"
        return enc

    def canonical(self) -> dict:
        return {k: v for k, v in sorted(self.data.items()) if k not in _LOCATION_KEYS}

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def provenance(self, **seeds: int) -> dict:
        return {
            "config_hash": self.config_hash(),
            "code_version": __version__,
            "seeds": {"train": self.seed, "folds": self.data["folds"]["seed"], **seeds},
        }

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1)
