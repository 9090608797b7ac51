"""Run configuration: an INI document with [data] [model] [loss] [optim] [report].

Every key has a default, so an empty file is a valid zero-edit run. Unknown
sections or keys are rejected while parsing, before any compute starts.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SceneSpec
from .losses import LossConfig
from .nn import BRANCHES, NormPolicy
from .training import OptimConfig


class ConfigError(ValueError):
    """Bad configuration; the message names the offending section and key."""


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    train_samples: int = 200
    test_samples: int = 64
    seed: int = 0
    test_start: int = 100_000  # sample ids of the held-out split start here
    train_modality: str = "A"
    presence: float = 0.75
    concentration: float = 6.0
    noise: float = 0.02
    invert: bool = True

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(size=(self.size, self.size), presence=self.presence,
                         concentration=self.concentration, noise=self.noise, invert=self.invert)


@dataclass(frozen=True)
class ModelConfig:
    policy: str = "PLAIN_BN"
    widths: tuple[int, ...] = (8, 16)
    sn_branches: tuple[str, ...] = BRANCHES
    bottleneck_ratio: int = 2


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    eval_every: int = 0


@dataclass(frozen=True)
class ReportConfig:
    floor: float = 1e-8
    divergence_samples: int = 64
    batch_size: int = 8


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def replace(self, section: str, **changes) -> RunConfig:
        try:
            updated = dataclasses.replace(getattr(self, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
        return dataclasses.replace(self, **{section: updated})


# [optim] also carries the run seed and eval cadence, which live in TrainConfig
_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig, "optim": OptimConfig,
             "report": ReportConfig}
_OPTIM_EXTRA = {f.name for f in dataclasses.fields(TrainConfig)}


def _convert(raw: str, default, where: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if not items:
                raise ValueError("empty list")
            return tuple(type(default[0])(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, empty_lines_in_values=False)
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        schema = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        defaults = getattr(cfg, section)
        changes, train_changes = {}, {}
        for key, raw in parser.items(section):
            where = f"{source}: [{section}] {key}"
            if section == "optim" and key in _OPTIM_EXTRA:
                train_changes[key] = _convert(raw, getattr(cfg.train, key), where)
            elif key in schema:
                changes[key] = _convert(raw, getattr(defaults, key), where)
            else:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
        cfg = cfg.replace(section, **changes)
        if train_changes:
            cfg = cfg.replace("train", **train_changes)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    """Parse a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def validate(cfg: RunConfig) -> RunConfig:
    try:
        NormPolicy.parse(cfg.model.policy)
        cfg.data.scene_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.data.train_modality.upper() not in ("A", "B"):
        raise ConfigError(f"[data] train_modality must be A or B, got {cfg.data.train_modality!r}")
    if cfg.data.train_samples < 1 or cfg.data.test_samples < 1:
        raise ConfigError("[data] sample counts must be positive")
    if not set(b.upper() for b in cfg.model.sn_branches) <= set(BRANCHES):
        raise ConfigError(f"[model] sn_branches must be drawn from {BRANCHES}")
    if cfg.report.floor <= 0:
        raise ConfigError("[report] floor must be positive")
    return cfg


def format_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ", ".join(str(t) for t in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    out = []
    for section in _SECTIONS:
        out.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            out.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
        if section == "optim":
            for f in dataclasses.fields(cfg.train):
                out.append(f"{f.name} = {fmt(getattr(cfg.train, f.name))}")
        out.append("")
    return "\n".join(out)
