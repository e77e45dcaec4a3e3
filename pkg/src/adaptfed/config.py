"""Experiment files: one JSON document describing a complete, reproducible run.

Every section maps onto a dataclass that already validates itself, so the
loader's job is limited to rejecting unknown keys, attaching the section
path to any error and filling defaults.  Defaults:

==================  =========================================================
section             keys (default)
==================  =========================================================
top level           experiment ("federated" | "sfda"), strategy ("adaptfed"),
                    seed (0), output_dir ("runs/default")
task                num_classes (10), input_dim (32), num_clients (50),
                    samples_per_client (200), shift ("label-skew"),
                    groups (4), noise_max (1.0), separation (8.0),
                    cluster_std (1.0), train_frac (0.8)
partition           scheme ("synthetic" | "pathological" | "dirichlet" |
                    "pachinko"), alpha (0.3), beta (10.0), low (0.4),
                    high (0.6), pool_size (10000), coarse_classes (5),
                    min_samples (10; partitions are redrawn until
                    every client holds at least this many)
arch                input_dim (32), d (16), blocks (8), levels (2),
                    tokens (4), num_classes (10)
rounds              rounds (200), local_epochs (5), lr (0.01),
                    global_lr (0.3), sample_frac (0.2), batch_size (32),
                    weighting ("cohort"), generator_step ("descent"),
                    eval_every (10), workers (1), chunk (16)
hypernet            embed_dim (32), hidden (100), layers (2), rank (null)
sfda (optional)     kd_weight (1.0), confidence (0.9), temperature (2.0),
                    omega (5), t_start (10), rounds (30), local_epochs (1),
                    lr (0.05), batch_size (32), pretrain_epochs (30),
                    pretrain_lr (0.05), aggregate (true), source_size
                    (2000), angle (0.9), scale_spread (0.5), shift_std (1.0)
==================  =========================================================
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .datagen import SyntheticTaskSpec
from .federation import STRATEGIES, RoundConfig
from .model import Arch
from .numcore import ConfigurationError
from .sfda import SfdaConfig

EXPERIMENTS = ("federated", "sfda")
SCHEMES = ("synthetic", "pathological", "dirichlet", "pachinko")


@dataclass
class PartitionConfig:
    scheme: str = "synthetic"
    alpha: float = 0.3
    beta: float = 10.0
    low: float = 0.4
    high: float = 0.6
    pool_size: int = 10000
    coarse_classes: int = 5
    min_samples: int = 10

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError("alpha and beta must be positive")
        if not 0 <= self.low <= self.high:
            raise ConfigurationError("need 0 <= low <= high")
        if self.pool_size < 1:
            raise ConfigurationError("pool_size must be positive")
        if self.min_samples < 2:
            raise ConfigurationError("min_samples must be at least 2 so every client can be split")


@dataclass
class HyperNetConfig:
    embed_dim: int = 32
    hidden: int = 100
    layers: int = 2
    rank: int | None = None

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden < 1 or self.layers < 1:
            raise ConfigurationError("embed_dim, hidden and layers must be >= 1")


@dataclass
class SfdaSection:
    """SFDA hyper-parameters plus the synthetic source/target shift."""

    params: SfdaConfig = field(default_factory=SfdaConfig)
    source_size: int = 2000
    angle: float = 0.9
    scale_spread: float = 0.5
    shift_std: float = 1.0


@dataclass
class ExperimentConfig:
    experiment: str = "federated"
    strategy: str = "adaptfed"
    seed: int = 0
    output_dir: str = "runs/default"
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    arch: Arch = field(default_factory=Arch)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    hypernet: HyperNetConfig = field(default_factory=HyperNetConfig)
    sfda: SfdaSection | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task"].pop("seed")
        out["rounds"].pop("seed")
        if self.sfda is not None:
            out["sfda"] = {**out["sfda"].pop("params"), **out["sfda"]}
        return out


def _build(cls, raw: Any, path: str, skip=()):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"{path}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")
    try:
        return cls(**raw)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def from_dict(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("<root>: expected a JSON object")
    sections = {"task", "partition", "arch", "rounds", "hypernet", "sfda"}
    top = {k: v for k, v in raw.items() if k not in sections}
    cfg = _build(ExperimentConfig, top, "<root>")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigurationError("<root>.seed: must be an integer")
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigurationError(f"<root>.experiment: must be one of {EXPERIMENTS}")
    if cfg.strategy not in STRATEGIES:
        raise ConfigurationError(f"<root>.strategy: must be one of {STRATEGIES}")
    cfg.task = _build(SyntheticTaskSpec, {**raw.get("task", {}), "seed": cfg.seed}, "task")
    cfg.partition = _build(PartitionConfig, raw.get("partition", {}), "partition")
    cfg.arch = _build(Arch, raw.get("arch", {}), "arch")
    cfg.rounds = _build(RoundConfig, {**raw.get("rounds", {}), "seed": cfg.seed}, "rounds")
    cfg.hypernet = _build(HyperNetConfig, raw.get("hypernet", {}), "hypernet")
    if "sfda" in raw and raw["sfda"] is not None:
        body = raw["sfda"]
        if not isinstance(body, dict):
            raise ConfigurationError("sfda: expected an object")
        extra = {f.name for f in fields(SfdaSection)} - {"params"}
        params = _build(SfdaConfig, {k: v for k, v in body.items() if k not in extra}, "sfda")
        cfg.sfda = _build(SfdaSection, {**{k: v for k, v in body.items() if k in extra}, "params": params},
                          "sfda")
    if cfg.experiment == "sfda" and cfg.sfda is None:
        cfg.sfda = SfdaSection()
    if cfg.arch.input_dim != cfg.task.input_dim or cfg.arch.num_classes != cfg.task.num_classes:
        raise ConfigurationError("arch: input_dim and num_classes must match the task section")
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())
