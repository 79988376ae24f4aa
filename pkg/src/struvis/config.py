"""Layered settings: command-line flag > environment variable > config file > default.

Config files are YAML mappings of sections to keys. Every key can be set from
the environment as ``STRUVIS_<SECTION>__<KEY>`` (upper-case), e.g.
``STRUVIS_GRPO__LR=0.5``; values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Mapping

import yaml

from .clients import DEFAULT_BACKOFF, DEFAULT_RETRIES, Endpoints
from .training import SFTConfig, TOY_GRPO, TOY_TASK

ENV_PREFIX = "STRUVIS_"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "grpo": asdict(TOY_GRPO),
    "toy": asdict(TOY_TASK),
    "sft": {**asdict(SFTConfig()), "n_positions": 84, "prev_token": True, "init_scale": 0.0},
    "train": {"seed": 0, "steps": 2000, "epochs": 3, "data": None, "out_dir": "runs", "init": None, "prompts": None},
    "rewards": {
        "gate_threshold": 0.6,
        "strict_json_schema": False,
        "gated_format_shaping_coef": 0.0,
        "use_understanding": True,
        "use_image": True,
        "max_retries": DEFAULT_RETRIES,
        "backoff": DEFAULT_BACKOFF,
        "reflexive_predicates": [],
    },
    # None falls back to base_url, then to the built-in local service address.
    "endpoints": {"base_url": None, **{k: None for k in asdict(Endpoints())}},
    "mock": {"enabled": False, "perception": 2, "completeness": 2, "faithfulness": 2, "hps": 1.0, "vlm": 1.0,
             "fail": {}, "bad_extract": []},
    "pipeline": {"output": "struvis_cot.jsonl", "per_domain": 10, "targets": None, "max_parallel": 1,
                 "resume": False, "retries": DEFAULT_RETRIES, "backoff": DEFAULT_BACKOFF},
    "serve": {"host": "127.0.0.1", "port": 8700},
    "validate": {"dataset": False},
    "cli": {"log_level": "WARNING"},
}


def load_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    for section, body in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}; known: {', '.join(DEFAULTS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        unknown = set(body) - set(DEFAULTS[section])
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return data


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    environ = os.environ if environ is None else environ
    out: dict[str, dict[str, Any]] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, _, key = name[len(ENV_PREFIX) :].lower().partition("__")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"environment variable {name} does not name a known setting")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        out.setdefault(section, {})[key] = value
    return out


class Settings:
    """Resolved view over defaults, a config file, the environment and flags."""

    def __init__(self, file_data: Mapping[str, Any] | None = None,
                 environ: Mapping[str, str] | None = None) -> None:
        self.file = dict(file_data or {})
        self.env = env_overrides(environ)

    @classmethod
    def load(cls, path: str | Path | None = None, environ: Mapping[str, str] | None = None) -> "Settings":
        return cls(load_file(path), environ)

    def source(self, dotted: str, flag: Any = None) -> str:
        section, key = dotted.split(".", 1)
        if flag is not None:
            return "flag"
        if key in self.env.get(section, {}):
            return "env"
        if key in self.file.get(section, {}):
            return "file"
        if key in DEFAULTS.get(section, {}):
            return "default"
        raise ConfigError(f"unknown setting {dotted}")

    def get(self, dotted: str, flag: Any = None) -> Any:
        section, key = dotted.split(".", 1)
        src = self.source(dotted, flag)
        if src == "flag":
            return flag
        if src == "env":
            return self.env[section][key]
        if src == "file":
            return self.file[section][key]
        return copy.deepcopy(DEFAULTS[section][key])

    def section(self, name: str, flags: Mapping[str, Any] | None = None) -> dict[str, Any]:
        flags = flags or {}
        return {key: self.get(f"{name}.{key}", flags.get(key)) for key in DEFAULTS[name]}
