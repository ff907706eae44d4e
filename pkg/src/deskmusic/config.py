"""Sectioned key=value run configuration with typed defaults.

Every key has a default below; a config file may only set known keys, and
command-line flags override file values. ``resolved()`` is what each run logs.
"""

from __future__ import annotations

import configparser
import copy
import json
from pathlib import Path

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "preset": "desk-1.5", "checkpoint_every": 100},
    "corpus": {"n": 64, "duration": 1.0},
    "sem-codec": {"steps": 200, "lr": 2e-3, "warmup": 10, "batch": 16},
    "ac-codec": {"steps": 200, "lr": 2e-3, "warmup": 10, "batch": 8},
    "lm": {"steps": 300, "lr": 1e-3, "warmup": 20, "batch": 4, "drop_prob": 0.7},
    "srfm": {"steps": 300, "lr": 1e-3, "warmup": 10, "batch": 8, "drop_prob": 0.7, "ode_steps": 10, "solver": "euler",
             "cfg_scale": 1.0},
    "evalkit": {"steps": 200},
    "generate": {"cfg_scale": 3.0, "top_k": 350, "temperature": 1.0},
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw: str) -> object:
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {type(default).__name__}") from e
    return raw.strip()


class RunConfig:
    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self._values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)

    @classmethod
    def from_file(cls, path: str | Path | None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case so typos are not silently folded
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    def set(self, section: str, key: str, value: object) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}] (known: {', '.join(DEFAULTS)})")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}] (known: {', '.join(DEFAULTS[section])})")
        self._values[section][key] = _coerce(section, key, str(value)) if isinstance(value, str) else value

    def override(self, section: str, **items: object) -> "RunConfig":
        """Apply command-line values that are not None."""
        for key, value in items.items():
            if value is not None:
                self.set(section, key, value)
        return self

    def get(self, section: str, key: str):
        return self._values[section][key]

    def section(self, section: str) -> dict[str, object]:
        return dict(self._values[section])

    def resolved(self) -> dict[str, dict[str, object]]:
        return copy.deepcopy(self._values)

    def dumps(self) -> str:
        return json.dumps(self._values, sort_keys=True)


__all__ = ["ConfigError", "DEFAULTS", "RunConfig"]
