"""JSON configuration: defaults, deep merge, unknown-key rejection."""

from __future__ import annotations

import copy
import json
from importlib import resources

from .errors import ConfigError


def default_config() -> dict:
    """The committed defaults (src/plvo/default.json)."""
    with resources.files("plvo").joinpath("default.json").open("r") as fh:
        return json.load(fh)


def _merge(base: dict, override: dict, path: str = ""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} expects an object")
            _merge(base[key], value, here)
        else:
            if isinstance(value, dict):
                raise ConfigError(f"config key {here!r} does not take an object")
            base[key] = value


def load_config(path=None, overrides=None) -> dict:
    """Defaults, optionally overlaid by a JSON file and dotted-key overrides.

    Unknown keys raise ConfigError. overrides is a list of "a.b.c=value"
    strings with JSON-parsed values (bare words fall back to strings).
    """
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top-level config must be an object")
        _merge(cfg, user)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set wants key.path=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        leaf = node
        keys = dotted.split(".")
        for k in keys[:-1]:
            leaf[k] = {}
            leaf = leaf[k]
        leaf[keys[-1]] = value
        _merge(cfg, node)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    arch = cfg["arch"]
    L = len(arch["strides"])
    for key in ("kernels", "point_channels", "image_channels", "fusion_hidden",
                "cost_kernels", "random_strides"):
        if len(arch[key]) != L:
            raise ConfigError(f"arch.{key} needs {L} entries (one per level), "
                              f"got {len(arch[key])}")
    if len(arch["upconv_kernels"]) != L - 1:
        raise ConfigError(f"arch.upconv_kernels needs {L - 1} entries")
    if len(cfg["train"]["level_weights"]) != L:
        raise ConfigError(f"train.level_weights needs {L} entries")
    if arch["random_8192"] and arch["fusion"]:
        raise ConfigError("arch.fusion requires the organized point map; "
                          "disable it when arch.random_8192 is on")
    if cfg["train"]["lr"] < cfg["train"]["lr_floor"]:
        raise ConfigError("train.lr must be >= train.lr_floor")


def _flatten(cfg: dict, path: str = ""):
    for key, value in cfg.items():
        here = f"{path}.{key}" if path else key
        if isinstance(value, dict):
            yield from _flatten(value, here)
        else:
            yield here, value


def describe_defaults() -> str:
    """One line per config key with its default, for --help."""
    lines = [f"  {k} = {json.dumps(v)}" for k, v in _flatten(default_config())]
    return "config keys and defaults (JSON file via --config, "\
           "override with --set key=value):\n" + "\n".join(lines)


def config_copy(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
