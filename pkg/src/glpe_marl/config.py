"""Flat ``section.key = value`` experiment configs.

Sections are ``env`` (:class:`SpreadConfig`), ``train`` (:class:`TrainConfig`)
and ``toy`` (:class:`ToyRunConfig`); keys are their field names. Lists are
comma separated; ``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .marl.learner import TrainConfig
from .spread import SpreadConfig
from .toy import ToyRunConfig


class ConfigError(ValueError):
    """Bad config file, key or value."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class ExperimentConfig:
    env: SpreadConfig = field(default_factory=SpreadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToyRunConfig = field(default_factory=ToyRunConfig)


SECTIONS = {"env": SpreadConfig, "train": TrainConfig, "toy": ToyRunConfig}


def _coerce(raw: str, tp, key: str):
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp in (int, float, str):
            return tp(raw)
        origin = typing.get_origin(tp)
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(inner(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}", key) from None
    raise ConfigError(f"{key}: unsupported field type {tp}", key)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
        hints = typing.get_type_hints(SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
        values[section][name] = _coerce(raw, hints[name], key)
    try:
        return ExperimentConfig(**{s: cls(**values[s]) for s, cls in SECTIONS.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_render(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text)
