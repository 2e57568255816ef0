"""JSON experiment configuration with fail-fast validation.

A config file holds one top-level ``"experiment"`` object::

    {"experiment": {"command": "curve", "seed": 7, "output_dir": "out",
                    "params": {"width": 200}}}

``params`` are merged over the command's defaults; unknown keys anywhere are errors.
"""

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from ..errors import ConfigError

TOP_KEYS = {"command", "seed", "output_dir", "params"}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "srank-gaussian": {
        "sizes": [50, 200, 2000],
        "alphas": [1.0, 0.25],
        "draws": 10,
    },
    "normality": {
        "widths": [32, 2000],
        "draws": 10000,
        "seeds": 5,
        "stable_rank_fraction": 0.05,
        "spectral_norm": 1.0,
        "sigma_b": 0.0,
        "input_norm": 1.0,
        "method": "sphere",
        "alpha": 0.01,
    },
    "gp-ntk": {
        "activation": "erf",
        "n_points": 4,
        "sigma_b": 1.0,
        "method": "sphere",
        "gp": {"width": 2000, "input_dim": 2000, "depth": 3, "stable_rank": 100.0, "inits": 200},
        "ntk": {"width": 1000, "input_dim": 1000, "outputs": 10, "depth": 3,
                "stable_rank": 50.0, "output_stable_rank": 10.0, "inits": 1},
        "drift": {"widths": [1000, 50], "steps": 500, "learning_rate": 0.01, "seeds": 5,
                  "stable_rank_fraction": 0.05},
    },
    "curve": {
        "width": 200,
        "depth": 5,
        "stable_ranks": [5.0, 50.0, 200.0],
        "spectral_norm": 28.284271247461902,
        "activation": "tanh",
        "seeds": 10,
        "n_points": 256,
        "sigma_b": 0.0,
        "gamma_mode": "inv_sqrt_fanin",
        "radius": None,
        "method": "cube",
    },
    "toy-training": {
        "x_diag": [1.0, 2.0, 3.0],
        "y_diag": [3.0, 2.0, 1.0],
        "w0_diag": [1.0, 1.0, 1.0],
        "learning_rate": 1e-3,
        "steps": 30000,
        "record_every": 10,
    },
    "mnist": {
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
        "train_size": 1000,
        "test_size": 1000,
        "hidden": 750,
        "synthetic_classes": 2,
        "synthetic_separation": 10.0,
        "noise": {
            "srank_targets": [20.0, 75.0, 187.0],
            "shuffle_fractions": [0.0, 1.0],
            "seeds": 5,
            "epochs": 5,
            "batch_size": 100,
            "learning_rate": 1.0,
            "spectral_norm": None,
            "method": "cube",
        },
        "regularization": {
            "models": 20,
            "epochs": 1,
            "batch_size": 100,
            "learning_rate": 1.0,
            "l1": [0.0, 1e-5, 1e-4, 1e-3],
            "l2": [0.0, 1e-4, 1e-3, 1e-2],
            "srank_init": [10.0, 50.0, 187.0],
        },
    },
    "sample": {
        "n_out": 64,
        "n_in": 64,
        "stable_rank": 8.0,
        "spectral_norm": 2.0,
        "method": "sphere",
        "count": 4,
        "format": "binary",
        "max_attempts": 1000000,
    },
}


@dataclass
class ExperimentConfig:
    command: str
    seed: int
    output_dir: Optional[str]
    params: Dict[str, Any] = field(default_factory=dict)


def _merge(defaults, given, where):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}{key!r}; allowed: {sorted(defaults)}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key!r} must be an object")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = _check_type(defaults[key], value, f"{where}{key}")
    return out


def _check_type(default, value, where):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return value
    return value


def default_params(command):
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}; expected one of {sorted(DEFAULTS)}")
    return copy.deepcopy(DEFAULTS[command])


def parse_config(obj, command, seed_override=None, out_override=None):
    """Validate a decoded JSON document for ``command``."""
    if not isinstance(obj, dict) or set(obj) != {"experiment"}:
        raise ConfigError('config must be an object with the single key "experiment"')
    exp = obj["experiment"]
    if not isinstance(exp, dict):
        raise ConfigError('"experiment" must be an object')
    unknown = set(exp) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown experiment keys {sorted(unknown)}; allowed: {sorted(TOP_KEYS)}")
    if "command" in exp and exp["command"] != command:
        raise ConfigError(f"config is for {exp['command']!r}, not {command!r}")
    seed = seed_override if seed_override is not None else exp.get("seed")
    if seed is None:
        raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    output_dir = out_override if out_override is not None else exp.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    params = exp.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError('"params" must be an object')
    return ExperimentConfig(command, seed, output_dir, _merge(default_params(command), params, ""))


def load_config(path, command, seed_override=None, out_override=None):
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(obj, command, seed_override, out_override)
