"""Flat dotted-key experiment configuration.

A config is a plain ``dict`` such as ``{"train.gamma": 70, "toggles.pgl": true}``.
Files hold the same flat JSON; command-line ``--set key=value`` pairs are
applied after the file, so the last assignment wins.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path

from .data import DatasetSpec
from .evaluation import InferencePlan
from .losses import Toggles
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "DUALSEG_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _defaults_of(prefix: str, cls, skip=()) -> dict:
    obj = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f"{prefix}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    return out


def defaults() -> dict:
    cfg = {"data.path": None}
    cfg.update(_defaults_of("data", DatasetSpec))
    cfg.update({"split.labeled_ratio": 0.1, "split.test_fraction": 0.2, "split.seed": 0})
    cfg.update(_defaults_of("train", TrainConfig, skip=("toggles",)))
    cfg.update(_defaults_of("toggles", Toggles))
    cfg.update(_defaults_of("eval", InferencePlan))
    cfg.update({"eval.mode": "ensemble", "eval.spacing_aware": False})
    cfg["output_dir"] = None
    return cfg


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply(cfg: dict, updates: dict) -> dict:
    out = dict(cfg)
    for k, v in updates.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = v
    return out


def parse_assignments(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected key=value, got {pair!r}")
        out[key.strip()] = parse_value(value)
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a flat JSON object")
        cfg = apply(cfg, data)
    return apply(cfg, overrides or {})


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = section(cfg, "data")
    d.pop("path")
    d["volume_shape"] = tuple(d["volume_shape"])
    d["spacing"] = tuple(d["spacing"])
    return DatasetSpec(**d)


def toggles(cfg: dict) -> Toggles:
    return Toggles(**section(cfg, "toggles"))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(toggles=toggles(cfg), **section(cfg, "train"))


def inference_plan(cfg: dict) -> InferencePlan:
    e = section(cfg, "eval")
    return InferencePlan(tuple(e["window_shape"]), tuple(e["stride"]), e["aggregation"])


def validate(cfg: dict) -> None:
    """Build every typed section once so bad values fail before any work starts."""
    try:
        dataset_spec(cfg)
        train_config(cfg)
        inference_plan(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["eval.mode"] not in ("ensemble", "A", "B"):
        raise ConfigError(f"eval.mode must be ensemble, A or B, got {cfg['eval.mode']!r}")
    ratio = cfg["split.labeled_ratio"]
    if not 0 < ratio <= 1:
        raise ConfigError(f"split.labeled_ratio must be in (0, 1], got {ratio}")
    if not 0 <= cfg["split.test_fraction"] < 1:
        raise ConfigError("split.test_fraction must be in [0, 1)")


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
