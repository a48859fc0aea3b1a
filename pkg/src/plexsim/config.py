"""Experiment configuration: a structured YAML file, validated before any
simulation starts, with a canonical serialization so identical configs hash
identically regardless of key order or formatting.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .learning import ModelSpec, PartitionScheme, TrainerConfig
from .protocol import success_threshold

ALGORITHMS = ("plexus", "fl", "dpsgd", "gl")


@dataclass(frozen=True)
class TopologyConfig:
    kind: str = "regular"  # regular | one_peer_exp
    degree: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("regular", "one_peer_exp"):
            raise ValueError(f"unknown topology kind {self.kind!r}")
        if self.kind == "regular" and self.degree < 1:
            raise ValueError("regular topology needs degree >= 1")


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 1
    n_samples: int = 20000
    d_in: int = 32
    classes: int = 10
    noise: float = 0.0
    class_sep: float = 2.0


@dataclass(frozen=True)
class TracesConfig:
    """Either point at CSV traces or describe synthetic ones."""

    latency_path: Optional[str] = None
    profiles_path: Optional[str] = None
    cities: int = 8
    seed: int = 7
    median_rtt_ms: float = 80.0
    rtt_sigma: float = 0.5
    uplink_median_bps: float = 30_000.0
    downlink_median_bps: float = 60_000.0
    sec_per_step_median: float = 0.4
    profile_sigma: float = 0.6


@dataclass(frozen=True)
class StopConfig:
    max_rounds: int = 500
    max_virtual_s: float = 48 * 3600.0

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.max_virtual_s <= 0:
            raise ValueError("max_virtual_s must be positive")


@dataclass(frozen=True)
class EvalConfig:
    every_rounds: int = 10      # plexus and fl evaluate at round boundaries
    every_seconds: float = 7200.0  # dpsgd and gl evaluate on the virtual clock

    def __post_init__(self) -> None:
        if self.every_rounds < 1:
            raise ValueError("eval.every_rounds must be >= 1")
        if self.every_seconds <= 0:
            raise ValueError("eval.every_seconds must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    n: int
    sample_size: int = 10
    success_fraction: float = 1.0
    gl_timeout_s: float = 60.0
    shared_init: bool = True
    init_seed: int = 0
    protocol_seed: int = 42
    repetitions: int = 1
    targets: tuple[float, ...] = (0.85,)
    model_family: str = "linear"
    model_hidden: int = 32
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionScheme = field(default_factory=lambda: PartitionScheme("iid"))
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    traces: TracesConfig = field(default_factory=TracesConfig)
    stop: StopConfig = field(default_factory=StopConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; pick from {ALGORITHMS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.algorithm in ("plexus", "fl"):
            if not (1 <= self.sample_size <= self.n):
                raise ValueError(
                    f"sample_size must be in [1, n], got {self.sample_size} with n={self.n}"
                )
            if not (0.0 < self.success_fraction <= 1.0):
                raise ValueError("success_fraction must be in (0, 1]")
            if success_threshold(self.sample_size, self.success_fraction) < 1:
                raise ValueError("floor(sample_size * success_fraction) must be >= 1")
        if self.algorithm == "dpsgd" and self.topology.kind == "regular":
            if self.topology.degree >= self.n:
                raise ValueError("topology degree must be smaller than n")
            if (self.topology.degree * self.n) % 2 != 0:
                raise ValueError("n * degree must be even for a regular graph")
        if self.algorithm == "gl" and self.gl_timeout_s <= 0:
            raise ValueError("gl_timeout_s must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for t in self.targets:
            if not (0.0 < t <= 1.0):
                raise ValueError(f"target accuracy must be in (0, 1], got {t}")
        if not self.targets:
            raise ValueError("need at least one target accuracy")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            family=self.model_family,
            d_in=self.dataset.d_in,
            classes=self.dataset.classes,
            hidden=self.model_hidden,
        )

    def canonical_dict(self) -> dict[str, Any]:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


_SECTION_TYPES = {
    "trainer": TrainerConfig,
    "dataset": DatasetConfig,
    "partition": PartitionScheme,
    "topology": TopologyConfig,
    "traces": TracesConfig,
    "stop": StopConfig,
    "eval": EvalConfig,
}


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            section_cls = _SECTION_TYPES[key]
            section_known = set(section_cls.__dataclass_fields__)
            section_unknown = set(value) - section_known
            if section_unknown:
                raise ValueError(
                    f"unknown keys in config section {key!r}: {sorted(section_unknown)}"
                )
            kwargs[key] = section_cls(**value)
        elif key == "targets":
            kwargs[key] = tuple(float(t) for t in value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValueError(f"config parse error in {path}: {exc}") from None
    if raw is None:
        raise ValueError(f"config is empty: {path}")
    try:
        cfg = config_from_dict(raw)
    except TypeError as exc:
        raise ValueError(f"config error in {path}: {exc}") from None
    _check_paths(cfg, path.parent)
    return cfg


def _check_paths(cfg: ExperimentConfig, base: Path) -> None:
    for attr in ("latency_path", "profiles_path"):
        p = getattr(cfg.traces, attr)
        if p is not None and not (base / p).exists() and not Path(p).exists():
            raise ValueError(f"trace file not found: {p}")


def resolve_trace_path(cfg_path: str | Path, trace_path: str) -> Path:
    """Trace paths are relative to the config file first, then the cwd."""
    rel = Path(cfg_path).parent / trace_path
    return rel if rel.exists() else Path(trace_path)
