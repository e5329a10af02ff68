"""
Declarative run configuration (YAML) with a versioned schema.

A config file is a mapping with ``schema_version: 1`` and optional sections;
anything omitted takes the built-in default, and unknown keys anywhere are
rejected. Two profiles ship with the package: ``default`` (the full 60 MHz /
40 ms corpus) and ``desk`` (6 short, low-rate captures for quick runs).
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .channel import ChannelModelParams
from .dataset import PipelineSettings, RisPipeline, ScenarioConfig
from .detector import DetectorParams
from .errors import ConfigError
from .evaluation import MatchConfig
from .spectrogram import DEFAULT_DB_RANGE, StftParams

SCHEMA_VERSION = 1
PROFILES = ("default", "desk")
OUTPUT_ROOT_ENV = "RISENSE_OUTPUT_ROOT"


@dataclass(frozen=True)
class RisStudyConfig:
    """Monte-Carlo study of the greedy optimizer on synthetic channels."""

    trials: int = 1000
    iterations: int = 300
    n_elements: int = 76
    rician_k: float = 0.0
    direct_gain_db: float = -math.inf
    alpha: float = 1.0
    order: str = "sequential"
    exhaustive: bool = False
    trace_files: int = 10

    def __post_init__(self):
        if self.trials <= 0 or self.iterations < 0 or self.n_elements < 0 or self.trace_files < 0:
            raise ValueError("trials must be positive; iterations, n_elements and trace_files non-negative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.order not in ("sequential", "random"):
            raise ValueError("order must be 'sequential' or 'random'")
        if self.exhaustive and self.n_elements > 20:
            raise ValueError("exhaustive comparison is limited to n_elements <= 20")


@dataclass(frozen=True)
class RisSection:
    alpha: float = 1.0
    max_iterations: int = 300
    order: str = "sequential"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.order not in ("sequential", "random"):
            raise ValueError("order must be 'sequential' or 'random'")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    stft: StftParams = field(default_factory=StftParams)
    db_range: tuple = DEFAULT_DB_RANGE
    channel: ChannelModelParams = field(default_factory=ChannelModelParams)
    ris: RisSection = field(default_factory=RisSection)
    detector: DetectorParams = field(default_factory=DetectorParams)
    match: MatchConfig = field(default_factory=MatchConfig)
    ris_study: RisStudyConfig = field(default_factory=RisStudyConfig)
    output_root: str = "risense_out"
    ris_pipeline: RisPipeline = RisPipeline.IDEAL
    jobs: int = 1
    save_iq: bool = False
    image_format: str = "png"

    @property
    def master_seed(self) -> int:
        return self.scenario.master_seed

    def pipeline_settings(self) -> PipelineSettings:
        return PipelineSettings(stft=self.stft, channel=self.channel, alpha=self.ris.alpha,
                                greedy_iterations=self.ris.max_iterations, greedy_order=self.ris.order,
                                db_range=tuple(self.db_range))

    def with_overrides(self, *, seed: Optional[int] = None, out: Optional[str] = None, jobs: Optional[int] = None,
                       ris: Optional[str] = None, save_iq: Optional[bool] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, master_seed=int(seed)))
        if out is not None:
            cfg = dataclasses.replace(cfg, output_root=str(out))
        if jobs is not None:
            if jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg = dataclasses.replace(cfg, jobs=int(jobs))
        if ris is not None:
            cfg = dataclasses.replace(cfg, ris_pipeline=RisPipeline(ris))
        if save_iq is not None:
            cfg = dataclasses.replace(cfg, save_iq=bool(save_iq))
        return cfg


# (section name, dataclass, keys that may not be set from a file)
_SECTIONS = {
    "scenario": (ScenarioConfig, ()),
    "stft": (StftParams, ()),
    "channel": (ChannelModelParams, ("seed",)),
    "ris": (RisSection, ()),
    "detector": (DetectorParams, ()),
    "match": (MatchConfig, ()),
    "ris_study": (RisStudyConfig, ()),
}
_SCALARS = {"schema_version", "output_root", "ris_pipeline", "jobs", "save_iq", "image_format", "image"}


def _number(key: str, value, kind):
    # YAML 1.1 reads exponent literals without a sign ("60.0e6") as strings
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if kind is int:
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        return _number(key, value, type(default))
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in default):
            return tuple(_number(key, v, float) for v in value)
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _section(name: str, raw, cls, forbidden) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(forbidden)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {k: _coerce(f"{name}.{k}", v, defaults.get(k)) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def from_mapping(doc) -> RunConfig:
    """Validate a parsed config document and build a :class:`RunConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    unknown = sorted(set(doc) - _SCALARS - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(name, doc.get(name), cls, forbidden)
              for name, (cls, forbidden) in _SECTIONS.items()}

    image = doc.get("image") or {}
    if not isinstance(image, dict) or set(image) - {"db_range"}:
        raise ConfigError("section 'image' accepts only 'db_range'")
    db_range = tuple(float(v) for v in image.get("db_range", DEFAULT_DB_RANGE))
    if len(db_range) != 2 or not db_range[0] < db_range[1]:
        raise ConfigError(f"image.db_range must be [low, high] with low < high, got {db_range}")
    kwargs["db_range"] = db_range

    try:
        kwargs["ris_pipeline"] = RisPipeline(doc.get("ris_pipeline", RisPipeline.IDEAL.value))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    jobs = doc.get("jobs", 1)
    if not isinstance(jobs, int) or isinstance(jobs, bool) or jobs < 1:
        raise ConfigError("jobs must be a positive integer")
    save_iq = doc.get("save_iq", False)
    if not isinstance(save_iq, bool):
        raise ConfigError("save_iq must be true or false")
    image_format = doc.get("image_format", "png")
    if image_format not in ("png", "jpg"):
        raise ConfigError("image_format must be 'png' or 'jpg'")
    kwargs.update(jobs=jobs, save_iq=save_iq, image_format=image_format,
                  output_root=str(doc.get("output_root", "risense_out")))
    return RunConfig(**kwargs)


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; available: {', '.join(PROFILES)}")
    return resources.files("risense").joinpath("profiles").joinpath(f"{name}.yaml").read_text(encoding="utf-8")


def load_config(source: Optional[str] = None) -> RunConfig:
    """Load a config from a file path or a built-in profile name (default: ``default``).

    ``RISENSE_OUTPUT_ROOT`` overrides ``output_root`` when set.
    """
    source = source or "default"
    path = Path(source)
    if path.is_file():
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
    elif source in PROFILES:
        text = profile_text(source)
    else:
        raise ConfigError(f"{source!r} is neither a file nor a profile ({', '.join(PROFILES)})")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc
    cfg = from_mapping(doc)
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        cfg = dataclasses.replace(cfg, output_root=env_root)
    return cfg
