"""Flat dotted-key experiment configuration.

A config file is a single YAML (or JSON) mapping such as::

    fed.strategy: la_lora
    privacy.epsilon_target: 1.0
    filter.kind: binomial5

Unknown keys are rejected; every key has an explicit default except the
required ones. A ``summary.json`` written by ``run`` is also accepted: its
embedded ``config`` block is used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .dp import PrivacySpec
from .fedsim import FedPlan, Strategy
from .lora import AlternationSchedule, Factor
from .smoothing import kernel_from_config

__all__ = ["ConfigError", "DEFAULTS", "REQUIRED", "load_config", "resolve", "dump_defaults", "Experiment", "build"]


class ConfigError(ValueError):
    pass


REQUIRED = ("fed.strategy",)

DEFAULTS: dict = {
    "seed": 0,
    "task.kind": "blobs",
    "task.n_classes": 10,
    "task.dim": 32,
    "task.per_class": 200,
    "task.separation": 3.0,
    "task.shift": 1.0,
    "task.pretrain_steps": 50,
    "task.pretrain_lr": 0.5,
    "task.csv_path": None,
    "task.label_column": "label",
    "fed.strategy": "la_lora",
    "fed.n_clients": 8,
    "fed.rounds": 50,
    "fed.local_steps": 20,
    "fed.client_rate": 0.5,
    "fed.dirichlet_beta": 0.1,
    "fed.schedule.block_len": 1,
    "fed.schedule.first_factor": "B",
    "fed.lr_a": 0.01,
    "fed.lr_b": 0.01,
    "fed.lr_decay": 0.99,
    "fed.rank": 4,
    "fed.alpha": 4.0,
    "fed.client_sampling": "uniform",
    "fed.optimizer": "plain",
    "fed.workers": 1,
    "privacy.clip_c": 1.0,
    "privacy.sigma": 1.0,
    "privacy.batch_fraction": 0.1,
    "privacy.delta": 1e-5,
    "privacy.epsilon_target": None,
    "filter.on": True,
    "filter.kind": "binomial5",
    "filter.sigma_s": 1.0,
    "filter.radius": 2,
}

_INT = {"seed", "task.n_classes", "task.dim", "task.per_class", "task.pretrain_steps", "fed.n_clients", "fed.rounds",
        "fed.local_steps", "fed.schedule.block_len", "fed.rank", "fed.workers", "filter.radius"}
_BOOL = {"filter.on"}
_STR = {"task.kind", "task.label_column", "fed.strategy", "fed.schedule.first_factor", "fed.client_sampling",
        "fed.optimizer", "filter.kind"}
_OPT_FLOAT = {"privacy.epsilon_target"}
_OPT_STR = {"task.csv_path"}


def _coerce(key, value):
    if key in _OPT_FLOAT or key in _OPT_STR:
        if value is None:
            return None
        return str(value) if key in _OPT_STR else _coerce_float(key, value)
    if key in _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if key in _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if key in _STR:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return _coerce_float(key, value)


def _coerce_float(key, value):
    if isinstance(value, str):
        # YAML 1.1 reads exponent literals without a dot, such as 1e-5, as strings
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{key}: must be finite")
    return value


def resolve(raw: dict, overrides: dict | None = None) -> dict:
    """Validate keys and types, fill defaults and apply overrides."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of dotted keys")
    if "config" in raw and isinstance(raw["config"], dict):  # a summary.json
        raw = raw["config"]
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    missing = [k for k in REQUIRED if k not in merged]
    if missing:
        raise ConfigError(f"missing required key: {', '.join(missing)}")
    out = {}
    for key, default in DEFAULTS.items():
        out[key] = _coerce(key, merged.get(key, default))
    try:
        Strategy(out["fed.strategy"])
    except ValueError:
        raise ConfigError(f"fed.strategy: unknown strategy {out['fed.strategy']!r}") from None
    if out["fed.schedule.first_factor"] not in ("A", "B"):
        raise ConfigError("fed.schedule.first_factor: must be 'A' or 'B'")
    if out["task.kind"] not in ("blobs", "csv"):
        raise ConfigError("task.kind: must be 'blobs' or 'csv'")
    if out["task.kind"] == "csv" and not out["task.csv_path"]:
        raise ConfigError("task.csv_path: required when task.kind is 'csv'")
    return out


def load_config(path, overrides: dict | None = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if Path(path).suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return resolve({} if raw is None else raw, overrides)


def dump_defaults() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False, default_flow_style=False)


@dataclass(frozen=True)
class Experiment:
    plan: FedPlan
    privacy: PrivacySpec
    kernel: object
    seed: int
    config: dict


def build(cfg: dict, sigma: float | None = None) -> Experiment:
    """Turn a resolved config into simulator objects.

    ``sigma`` (from calibration) replaces ``privacy.sigma`` when given.
    ``local_dataset_size`` is a placeholder; each client uses its own.
    """
    try:
        plan = FedPlan(
            n_clients=cfg["fed.n_clients"],
            rounds=cfg["fed.rounds"],
            local_steps=cfg["fed.local_steps"],
            client_rate=cfg["fed.client_rate"],
            dirichlet_beta=cfg["fed.dirichlet_beta"],
            strategy=Strategy(cfg["fed.strategy"]),
            filter_on=cfg["filter.on"],
            schedule=AlternationSchedule(cfg["fed.schedule.block_len"], Factor(cfg["fed.schedule.first_factor"])),
            lr_a=cfg["fed.lr_a"],
            lr_b=cfg["fed.lr_b"],
            lr_decay=cfg["fed.lr_decay"],
            rank=cfg["fed.rank"],
            alpha=cfg["fed.alpha"],
            client_sampling=cfg["fed.client_sampling"],
            optimizer=cfg["fed.optimizer"],
            workers=cfg["fed.workers"],
        )
        privacy = PrivacySpec(
            clip_c=cfg["privacy.clip_c"],
            sigma=cfg["privacy.sigma"] if sigma is None else sigma,
            batch_fraction=cfg["privacy.batch_fraction"],
            local_dataset_size=max(1, math.ceil(1.0 / cfg["privacy.batch_fraction"])),
            delta=cfg["privacy.delta"],
            epsilon_target=cfg["privacy.epsilon_target"],
        )
        kernel = kernel_from_config(cfg["filter.kind"], cfg["filter.sigma_s"], cfg["filter.radius"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Experiment(plan, privacy, kernel, cfg["seed"], cfg)
