"""INI-style run configuration with [grid], [model], [train] and [synthetic] sections."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from gapcast.grid import ConfigError, GridSpec
from gapcast.synthetic import SyntheticConfig
from gapcast.temporal import ModelConfig
from gapcast.training import TrainConfig

SECTIONS = {"grid": GridSpec, "model": ModelConfig, "train": TrainConfig, "synthetic": SyntheticConfig}


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


def _coerce(raw: str, tp, name: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(tp)):
        if raw.lower() in ("", "none"):
            return None
        return _coerce(raw, args[0], name)
    if origin is tuple:
        parts = raw.replace(":", ",").split(",")
        return tuple(_coerce(p, args[0], name) for p in parts)
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return tp(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot read {raw!r} as {tp.__name__}") from exc


def _build(cls, items: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, hints[k], f"[{section}] {k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    extra = set(cp.sections()) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    parts = {name: _build(cls, dict(cp[name]), name) if cp.has_section(name) else cls()
             for name, cls in SECTIONS.items()}
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
