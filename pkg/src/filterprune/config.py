"""INI-style prune configuration mirroring PruneConfig field names.

Example::

    [prune]
    criterion = l1-norm
    prune_percent = 50            ; or per layer: conv2:25, conv3:50
    finetune_epochs = 1
    skip_layers = conv1
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .pipeline import ConfigError, PruneConfig

SECTION = "prune"
FIELDS = {f.name: f for f in dataclasses.fields(PruneConfig)}
INT_FIELDS = {"finetune_epochs", "final_finetune_epochs", "seed", "batch_size", "bins"}
FLOAT_FIELDS = {"data_fraction", "lr", "momentum", "final_lr_factor"}


def _split_list(text: str) -> list[str]:
    return [item.strip() for item in text.replace(";", ",").split(",") if item.strip()]


def parse_prune_percent(text: str) -> int | dict[str, int]:
    text = text.strip()
    if ":" not in text:
        return int(text)
    out = {}
    for item in _split_list(text):
        layer, _, value = item.partition(":")
        out[layer.strip()] = int(value)
    return out


def parse_value(key: str, text: str):
    """Convert one config string to the type of PruneConfig field ``key``."""
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    try:
        if key in INT_FIELDS:
            return int(text)
        if key in FLOAT_FIELDS:
            return float(text)
        if key == "prune_percent":
            return parse_prune_percent(text)
        if key == "differential_budget":
            return None if text.lower() in ("", "none") else int(text)
        if key == "skip_layers":
            return None if text.lower() == "default" else _split_list(text)
        if key == "class_set":
            return [int(c) for c in _split_list(text)] or None
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None
    return text


def config_from_mapping(values: dict[str, str], base: PruneConfig | None = None) -> PruneConfig:
    config = dataclasses.replace(base) if base is not None else PruneConfig()
    for key, text in values.items():
        setattr(config, key, parse_value(key, text))
    return config


def load_config(path, overrides: dict[str, str] | None = None) -> PruneConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    if not parser.has_section(SECTION):
        raise ConfigError(f"{path} has no [{SECTION}] section")
    values = dict(parser[SECTION])
    values.update(overrides or {})
    return config_from_mapping(values).validate()


def format_config(config: PruneConfig) -> str:
    """Inverse of load_config, for writing a config back out."""
    lines = [f"[{SECTION}]"]
    for key in FIELDS:
        value = getattr(config, key)
        if isinstance(value, dict):
            text = ", ".join(f"{k}:{v}" for k, v in value.items())
        elif isinstance(value, list):
            text = ", ".join(str(v) for v in value)
        elif value is None:
            text = "default" if key == "skip_layers" else "none"
        else:
            text = str(value)
        if key == "class_set" and value is None:
            continue
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_config(config: PruneConfig, path):
    Path(path).write_text(format_config(config), encoding="utf-8")
