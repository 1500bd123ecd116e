"""Experiment configuration in a flat ``section.key = value`` text format.

Lines starting with ``#`` and blank lines are ignored. Tuples are written as
comma-separated values. Every key must belong to a known section field, and
values are parsed with the type of the field's default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Tuple

from .datagen import GeneratorConfig
from .reader import ModelConfig
from .stream import PRESETS, ExperimentSplit


class ConfigError(ValueError):
    """The config text is malformed or names an unknown key."""


@dataclass(frozen=True)
class TrainingConfig:
    lr_grid: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    epochs: int = 1
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    batch_size: int = 1
    validation_fraction: float = 0.1
    regimes: Tuple[str, ...] = tuple(PRESETS)
    regime: str = "reader"
    # take a full parameter checksum around every k-th inference (0 = version counters only)
    purity_check_every: int = 1000
    # a router BCE step on the revealed repurchase indicator at each window close
    router_close_bce: bool = True

    def __post_init__(self):
        if not self.lr_grid or any(lr <= 0 for lr in self.lr_grid):
            raise ConfigError("lr_grid needs positive learning rates")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        for name in (*self.regimes, self.regime):
            if name not in PRESETS:
                raise ConfigError(f"unknown regime {name!r}; known: {', '.join(PRESETS)}")
        if self.purity_check_every < 0:
            raise ConfigError("purity_check_every must be >= 0")


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    split: ExperimentSplit = field(default_factory=ExperimentSplit)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        try:
            self.split.validate(self.generator.window_seconds)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        # day indices are 0-based; an upper bound equal to timeline_days is an empty last day
        if self.split.online_days[1] > self.generator.timeline_days:
            raise ConfigError("online day range extends past the generated timeline")
        if self.model.n_fields != self.generator.n_fields:
            raise ConfigError(f"model.n_fields = {self.model.n_fields} but the generator "
                              f"has {self.generator.n_fields} fields")


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _parse_scalar(text: str, kind: type, key: str):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false, got {text!r}")
        return low == "true"
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _parse_value(text: str, default: Any, key: str):
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        kind = type(default[0]) if default else str
        if kind is int and any("." in t or "e" in t.lower() for t in items):
            kind = float
        return tuple(_parse_scalar(t, kind, key) for t in items)
    return _parse_scalar(text, type(default), key)


def _render_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(_render_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: ExperimentConfig = None) -> ExperimentConfig:
    """Parse config text over ``base`` (defaults if None); unknown keys are errors."""
    base = base or ExperimentConfig()
    overrides: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, rhs = (part.strip() for part in line.split("=", 1))
        if lhs.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {lhs!r} must look like section.key")
        section, key = lhs.split(".")
        if section not in overrides:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        current = getattr(base, section)
        names = {f.name for f in fields(current)}
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {lhs!r}")
        if key in overrides[section]:
            raise ConfigError(f"line {lineno}: duplicate key {lhs!r}")
        overrides[section][key] = _parse_value(rhs, getattr(current, key), lhs)
    try:
        parts = {s: replace(getattr(base, s), **overrides[s]) for s in SECTIONS}
        return ExperimentConfig(**parts)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        part = getattr(cfg, section)
        lines.append(f"# {section}")
        for f in fields(part):
            lines.append(f"{section}.{f.name} = {_render_value(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)
