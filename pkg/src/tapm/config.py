"""Experiment configuration: nested YAML checked against a fixed schema.

Unknown keys are rejected so a typo can never silently fall back to a default.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .attacks import ALGORITHMS, AttackConfig
from .data_zoo import REFERENCE_ZOO, DatasetSpec, TrainConfig
from .pubdef import PubDefConfig, WeightingScheme


class ConfigError(ValueError):
    pass


SELECTION_MODES = ("heuristic", "random-by-model", "random-by-group", "fixed")
ABLATIONS = ("leave-one-group-out", "add-per-group-count", "single-source", "random-selection")

_ATTACK_PARAMS = {f.name for f in fields(AttackConfig)} - {"algorithm", "epsilon", "steps"}

DEFAULTS = {
    "seed": 0,
    "dataset": {f.name: f.default for f in fields(DatasetSpec)},
    "zoo": {
        "train": {f.name: f.default for f in fields(TrainConfig)},
        "models": [asdict(r) for r in REFERENCE_ZOO],
    },
    "attacks": {
        "algorithms": ["pgd", "m-pgd", "di", "ti", "admix", "na"],
        "epsilon": 0.03,
        "steps": 50,
        "eval_size": 500,
        "params": {},
    },
    "defense": {
        "scheme": "random",
        "alpha": 0.1,
        "acc_mode": "error",
        "target_seed": 99,
        "cache_algorithms": ["pgd"],
        "cache_steps": 10,
        "versions": 4,
        "train": {f.name: f.default for f in fields(PubDefConfig)},
        "whitebox_baseline": True,
        "selection": {
            "mode": "heuristic",
            "sources": [],
            "tau": 5.0,
            "max_rounds": 2,
            "probe_epochs": 4,
            "score_size": 200,
        },
    },
    "game": {
        "sources": [],
        "algorithms": ["pgd"],
        "iterations": 20000,
    },
    "analysis": {"samples": 100, "method": "power", "pooled": False},
    "ablation": {"replicates": 3, "random_replicates": 5, "counts": [1, 2]},
}


def _typecheck(path, default, value):
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def _merge(path, default, override):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    out = copy.deepcopy(default)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in default:
            raise ConfigError(f"unknown config key {where!r}")
        if path.endswith("attacks") and key == "params":
            bad = set(value or {}) - _ATTACK_PARAMS
            if bad:
                raise ConfigError(f"unknown attack parameter(s) {sorted(bad)}")
            out[key] = dict(value or {})
        elif isinstance(default[key], dict):
            out[key] = _merge(where, default[key], value or {})
        else:
            out[key] = _typecheck(where, default[key], value)
    return out


def _validate(cfg):
    for alg in cfg["attacks"]["algorithms"] + cfg["defense"]["cache_algorithms"] + \
            cfg["game"]["algorithms"]:
        if alg not in ALGORITHMS:
            raise ConfigError(f"unknown attack algorithm {alg!r}")
    if cfg["defense"]["selection"]["mode"] not in SELECTION_MODES:
        raise ConfigError(f"selection.mode must be one of {SELECTION_MODES}")
    try:
        WeightingScheme.parse(cfg["defense"]["scheme"], cfg["defense"]["alpha"],
                              cfg["defense"]["acc_mode"])
        dataset_spec(cfg)
        attack_config(cfg)
        TrainConfig(**cfg["zoo"]["train"])
        PubDefConfig(**cfg["defense"]["train"])
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    for row in cfg["zoo"]["models"]:
        if not isinstance(row, dict) or set(row) != {"arch", "group", "seed"}:
            raise ConfigError(f"zoo.models rows need exactly arch/group/seed: {row!r}")
    if cfg["attacks"]["eval_size"] < 1:
        raise ConfigError("attacks.eval_size must be >= 1")
    if cfg["ablation"]["replicates"] < 1 or cfg["ablation"]["random_replicates"] < 1:
        raise ConfigError("ablation replicate counts must be >= 1")
    return cfg


def load_config(source=None, seed=None):
    """Merge a YAML file (path or mapping) over the defaults and validate it."""
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            raw = yaml.safe_load(Path(source).read_text()) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {source}: {err}") from err
    cfg = _merge("", DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    return _validate(cfg)


def config_digest(cfg, keys=None):
    part = cfg if keys is None else {k: cfg[k] for k in keys}
    return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()[:20]


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


def dataset_spec(cfg):
    d = dict(cfg["dataset"])
    d["seed"] = d.get("seed", 0)
    return DatasetSpec(**d)


def attack_config(cfg, algorithm="pgd", steps=None):
    a = cfg["attacks"]
    return AttackConfig(algorithm=algorithm, epsilon=a["epsilon"],
                        steps=steps or a["steps"], **a["params"])


def schema():
    """The default tree, which doubles as the schema (keys and value types)."""
    return copy.deepcopy(DEFAULTS)
