"""Flat INI-style run configuration with per-module sections.

Sections map onto the config dataclasses: [data] -> DataConfig,
[model] -> NetworkConfig, [train] -> TrainConfig (stage fields flattened
as stage1_lr, stage1_iters, ...), [run] -> seeds/output options.
Command-line ``--set section.key=value`` overrides win over the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass

from .data import DataConfig
from .errors import UsageError
from .model import NetworkConfig
from .training import StageConfig, TrainConfig


@dataclass(frozen=True)
class RunOptions:
    seeds: tuple = (1, 2, 3)
    n_scenes: int = 200
    data_seed: int = 7


@dataclass
class RunConfig:
    data: DataConfig
    model: NetworkConfig
    train: TrainConfig
    run: RunOptions


def default_config() -> RunConfig:
    return RunConfig(data=DataConfig(), model=NetworkConfig(), train=TrainConfig(), run=RunOptions())


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        if current and isinstance(current[0], float):
            return tuple(float(p) for p in parts)
        if current and isinstance(current[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return raw


_TRAIN_STAGE_KEYS = {
    "stage1_lr": ("stage1", "lr"),
    "stage1_iters": ("stage1", "iters"),
    "stage1_step": ("stage1", "step"),
    "stage2_lr": ("stage2", "lr"),
    "stage2_iters": ("stage2", "iters"),
    "stage2_step": ("stage2", "step"),
}


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    target = {"data": cfg.data, "model": cfg.model, "train": cfg.train, "run": cfg.run}.get(section)
    if target is None:
        raise UsageError(f"unknown config section [{section}]")
    if section == "train" and key in _TRAIN_STAGE_KEYS:
        stage_name, field_name = _TRAIN_STAGE_KEYS[key]
        stage = getattr(cfg.train, stage_name)
        current = getattr(stage, field_name)
        value = _parse_value(raw, current if current is not None else 0)
        new_stage = dataclasses.replace(stage, **{field_name: value})
        setattr(cfg, "train", dataclasses.replace(cfg.train, **{stage_name: new_stage}))
        return cfg
    if not hasattr(target, key):
        raise UsageError(f"unknown config key {section}.{key}")
    value = _parse_value(raw, getattr(target, key))
    setattr(cfg, section, dataclasses.replace(target, **{key: value}))
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file, then key=value overrides."""
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser[section].items():
                cfg = _apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        cfg = _apply(cfg, section.strip(), key.strip(), raw)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved config as INI text (written beside every run's outputs)."""
    parser = configparser.ConfigParser()
    for section, obj in (("data", cfg.data), ("model", cfg.model), ("run", cfg.run)):
        parser[section] = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            parser[section][f.name] = str(value)
    parser["train"] = {}
    for f in dataclasses.fields(cfg.train):
        value = getattr(cfg.train, f.name)
        if isinstance(value, StageConfig):
            parser["train"][f"{f.name}_lr"] = str(value.lr)
            parser["train"][f"{f.name}_iters"] = str(value.iters)
            parser["train"][f"{f.name}_step"] = str(value.resolved_step())
        else:
            parser["train"][f.name] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
