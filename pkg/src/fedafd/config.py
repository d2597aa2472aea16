"""Experiment configuration: defaults, file/flag parsing and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .control import NonIidWarning
from .data import DEFAULT_SEPARATION
from .submodel import check_fdr

MODES = ("none", "fd", "afd_multi", "afd_single")
MODELS = ("mlp", "cnn")
PARTITIONS = ("iid", "noniid")
AGGREGATIONS = ("all", "trained_only")
LINK_SAMPLING = ("per_round", "per_experiment")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    model: str = "mlp"
    hidden: int = 64
    cnn_channels: int = 8
    # data
    n_clients: int = 100
    samples_per_client: int = 100
    n_classes: int = 10
    dim: int = 32
    partition: str = "noniid"
    separation: float = DEFAULT_SEPARATION
    classes_per_client: int = 2
    # dropout
    mode: str = "none"
    fdr: float = 0.25
    # codecs
    quant8_down: bool = False
    quant8_up: bool = False
    dgc: bool = False
    dgc_ratio: float = 0.25
    dgc_clip: float = 1.0
    dgc_momentum: float = 0.9
    aggregate: str = "all"
    # training protocol
    rounds: int = 100
    fraction: Optional[float] = None  # None: 0.1 for afd_single, else 0.3
    lr: float = 0.05
    epochs: int = 1
    batch_size: int = 10
    target_accuracy: float = 0.85
    eval_every: int = 1
    seeds: tuple[int, ...] = (1,)
    # network
    down_mbps: tuple[float, float] = (5.0, 12.0)
    up_mbps: tuple[float, float] = (2.0, 5.0)
    link_sampling: str = "per_round"
    compute_seconds: float = 0.0
    # output
    out: str = "runs"
    run_id: str = ""
    baseline_summary: str = ""

    @property
    def client_fraction(self) -> float:
        if self.fraction is not None:
            return self.fraction
        return 0.1 if self.mode == "afd_single" else 0.3

    def replace(self, **changes) -> "ExperimentConfig":
        return validate(dataclasses.replace(self, **changes))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["down_mbps"] = list(self.down_mbps)
        d["up_mbps"] = list(self.up_mbps)
        return d

    def experiment_dict(self) -> dict[str, Any]:
        """Fields that affect results (no seeds or output locations)."""
        d = self.to_dict()
        for k in ("seeds", "out", "run_id", "baseline_summary"):
            d.pop(k)
        d["fraction"] = self.client_fraction
        return d

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        blob = json.dumps(self.experiment_dict(), sort_keys=True).encode()
        return f"{self.mode}-{hashlib.sha256(blob).hexdigest()[:8]}"


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_INT_FIELDS = {"hidden", "cnn_channels", "n_clients", "samples_per_client", "n_classes", "dim",
               "classes_per_client", "rounds", "epochs", "batch_size", "eval_every"}
_FLOAT_FIELDS = {"separation", "fdr", "dgc_ratio", "dgc_clip", "dgc_momentum", "fraction", "lr",
                 "target_accuracy", "compute_seconds"}
_BOOL_FIELDS = {"quant8_down", "quant8_up", "dgc"}
_STR_FIELDS = {"model", "partition", "mode", "aggregate", "link_sampling", "out", "run_id", "baseline_summary"}
_PAIR_FIELDS = {"down_mbps", "up_mbps"}


def _coerce(name: str, value: Any) -> Any:
    try:
        if name in _INT_FIELDS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if name in _FLOAT_FIELDS:
            if value is None and name == "fraction":
                return None
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if name in _BOOL_FIELDS:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on", "false", "0", "no", "off"):
                return value.lower() in ("true", "1", "yes", "on")
            if isinstance(value, int) and value in (0, 1):
                return bool(value)
            raise TypeError
        if name in _STR_FIELDS:
            if not isinstance(value, str):
                raise TypeError
            return value
        if name == "seeds":
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            elif isinstance(value, int):
                value = [value]
            seeds = tuple(int(v) for v in value)
            if any(isinstance(v, bool) for v in value):
                raise TypeError
            return seeds
        if name in _PAIR_FIELDS:
            if isinstance(value, str):
                value = value.split(",")
            pair = tuple(float(v) for v in value)
            if len(pair) != 2:
                raise TypeError
            return pair
    except (TypeError, ValueError):
        raise ConfigError(name, f"invalid value {value!r}") from None
    raise ConfigError(name, "unknown key")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every constraint; raise ConfigError naming the first bad field."""

    def need(cond: bool, name: str, msg: str):
        if not cond:
            raise ConfigError(name, msg)

    need(cfg.model in MODELS, "model", f"must be one of {MODELS}")
    need(cfg.mode in MODES, "mode", f"must be one of {MODES}")
    need(cfg.partition in PARTITIONS, "partition", f"must be one of {PARTITIONS}")
    need(cfg.aggregate in AGGREGATIONS, "aggregate", f"must be one of {AGGREGATIONS}")
    need(cfg.link_sampling in LINK_SAMPLING, "link_sampling", f"must be one of {LINK_SAMPLING}")
    for name in ("hidden", "cnn_channels", "n_clients", "samples_per_client", "n_classes", "dim",
                 "epochs", "batch_size", "eval_every", "classes_per_client"):
        need(getattr(cfg, name) > 0, name, "must be positive")
    need(cfg.rounds >= 0, "rounds", "must be nonnegative")
    if cfg.partition == "noniid":
        need(cfg.n_classes >= 2, "n_classes", "non-IID partitioning needs at least 2 classes")
        need(cfg.classes_per_client <= cfg.n_classes, "classes_per_client", "cannot exceed n_classes")
    if cfg.model == "cnn":
        side = int(round(cfg.dim ** 0.5))
        need(side * side == cfg.dim and side >= 4, "dim", "cnn needs a square input of side >= 4")
    need(cfg.separation > 0, "separation", "must be positive")
    try:
        check_fdr(cfg.fdr)
    except ValueError as e:
        raise ConfigError("fdr", str(e)) from None
    if cfg.fraction is not None:
        need(0.0 < cfg.fraction <= 1.0, "fraction", "must be in (0, 1]")
    need(cfg.lr > 0, "lr", "must be positive")
    need(0.0 < cfg.dgc_ratio <= 1.0, "dgc_ratio", "must be in (0, 1]")
    need(cfg.dgc_clip > 0, "dgc_clip", "must be positive")
    need(0.0 <= cfg.dgc_momentum < 1.0, "dgc_momentum", "must be in [0, 1)")
    need(0.0 <= cfg.target_accuracy <= 1.0, "target_accuracy", "must be in [0, 1]")
    need(len(cfg.seeds) > 0, "seeds", "need at least one seed")
    need(all(s >= 0 for s in cfg.seeds), "seeds", "must be nonnegative")
    need(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "must be distinct")
    for name in ("down_mbps", "up_mbps"):
        lo, hi = getattr(cfg, name)
        need(0 < lo <= hi, name, "must satisfy 0 < low <= high")
    need(cfg.compute_seconds >= 0, "compute_seconds", "must be nonnegative")
    if cfg.mode == "afd_single" and cfg.partition == "noniid":
        warnings.warn(
            "Single-Model AFD is not effective on non-IID data; consider partition=iid",
            NonIidWarning,
            stacklevel=2,
        )
    return cfg


def from_mapping(values: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    changes = {}
    for key, value in values.items():
        name = key.replace("-", "_")
        if name not in FIELDS:
            raise ConfigError(key, "unknown key")
        changes[name] = _coerce(name, value)
    return dataclasses.replace(base, **changes)


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Load a JSON object or a flat ``key = value`` file (``#`` comments allowed)."""
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        data = json.loads(stripped)
        if not isinstance(data, dict):
            raise ConfigError("<file>", "JSON config must be an object")
        return data
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"<line {lineno}>", f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def parse_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then file values, then flag overrides; validated."""
    cfg = ExperimentConfig()
    if path is not None:
        cfg = from_mapping(read_config_file(path), cfg)
    if overrides:
        cfg = from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return validate(cfg)
