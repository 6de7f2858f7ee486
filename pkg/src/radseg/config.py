"""Run configuration: one strict JSON document for a whole experiment.

Unknown keys are rejected so typos fail loudly; individual values can be
overridden from the command line with dotted paths (``detect.lr=0.01``).
"""

from __future__ import annotations

import copy
import json
import os

from .errors import ConfigError

DEFAULT_CONFIG = {
    "seed": None,  # falls back to $RADSEG_SEED, then 0
    "geometry": {
        "range_bins": 64,
        "angle_bins": 64,
        "doppler_bins": 32,
        "max_range": 50.0,
        "field_of_view": 3.141592653589793,
        "max_radial_velocity": 13.0,
        "noise_floor_power": 1.0,
    },
    "simulation": {
        "worlds": 3,
        "frames_per_world": 20,
        "objects": 4,
        "snr_db": 30.0,
        "split_worlds": {"train": 2.0, "val": 0.5, "test": 0.5},
    },
    "detect": {
        "epochs": 60,
        "lr": 1e-3,
        "lr_decay": 0.1,
        "decay_every_epochs": 20,
        "batch_size": 4,
        "lambda_offset": 1.0,
        "lambda_doppler": 1.0,
        "lambda_sparsity": 0.0,
        "tau_peak": 0.3,
        "k_max": 32,
        "val_every_epochs": 5,
        "channels": [16, 32, 64, 64],
    },
    "seg": {
        "epochs": 60,
        "lr": 0.05,
        "val_every_epochs": 10,
        "channels": [16, 32, 32, 16],
        "use_class_weights": True,
    },
    "grow": {"d_thresh": 6, "intensity_fraction": 0.5},
    "eval": {"distance_thresholds": [1.0, 3.0, 5.0], "tau_peak": 0.3, "k_max": 32},
    "prune": {"lambda_s": 1e-4, "fraction": 0.4, "fine_tune_epochs": 50},
}


def _merge_strict(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            out[key] = _merge_strict(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(config, assignment):
    """Apply one ``dotted.path=value`` override; value parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def load_config(path=None, overrides=()):
    """Defaults, optionally updated from a JSON file, then dotted overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        config = _merge_strict(DEFAULT_CONFIG, user)
    for assignment in overrides:
        apply_override(config, assignment)
    if config["seed"] is None:
        env = os.environ.get("RADSEG_SEED")
        try:
            config["seed"] = int(env) if env is not None else 0
        except ValueError as exc:
            raise ConfigError(f"RADSEG_SEED must be an integer, got {env!r}") from exc
    return config


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)
        fh.write("\n")
