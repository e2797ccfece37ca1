"""Run configuration: dataclasses plus a YAML loader with dotted-key overrides.

A config file mirrors the dataclass tree; every key is optional::

    seed: 7
    out_dir: runs/sample
    data:
      minute: data/sample_minute.csv
    forecast:
      target: BTC
      predictors: [ADA, LTC]
    gbt:
      learning_rate: grid

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError

MODELS = ("gbt", "lstm", "gru")


@dataclass
class DataConfig:
    minute: str | None = None
    daily: str | None = None
    exclude: list[str] = field(default_factory=list)


@dataclass
class CorrelationConfig:
    maincoins: list[str] = field(default_factory=lambda: ["BTC", "ETH"])
    regimes: list[str] = field(
        default_factory=lambda: ["daily", "sliding7", "sliding30", "tumbling7", "tumbling30"])
    mode: str = "ohlc"
    trend_altcoins: list[str] | None = None


@dataclass
class CausalityConfig:
    maincoins: list[str] = field(default_factory=lambda: ["BTC", "ETH"])
    altcoins: list[str] | None = None
    source: str = "minute"
    resample: str = "daily"
    p_max: int = 10
    d_max: int = 2
    direction: str = "forward"


@dataclass
class ForecastConfig:
    target: str = "BTC"
    predictors: list[str] | str = "auto"
    threshold: float = 0.6
    lag: int = 0
    models: list[str] = field(default_factory=lambda: list(MODELS))
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class GbtConfig:
    learning_rate: float | str = "grid"
    candidate_rates: list[float] = field(
        default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
    folds: int = 10
    max_iterations: int = 500
    patience: int = 20
    max_depth: int = 6
    min_node_size: int = 20


@dataclass
class RnnTrainConfig:
    depth: int = 2
    width: int = 32
    bptt_window: int = 64
    batch_size: int = 16
    learning_rate: float | str = "auto"
    lr_start: float = 1e-6
    lr_growth: float = 1.3
    max_epochs: int = 500
    patience: int = 20
    clip_norm: float | None = 5.0


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    correlation: CorrelationConfig = field(default_factory=CorrelationConfig)
    causality: CausalityConfig = field(default_factory=CausalityConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    rnn: RnnTrainConfig = field(default_factory=RnnTrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        _check(self.jobs >= 1, "jobs", "must be >= 1")
        f = self.forecast
        _check(0.0 <= f.threshold <= 1.0, "forecast.threshold", "must lie in [0, 1]")
        _check(f.lag >= 0, "forecast.lag", "must be >= 0")
        _check(len(f.split) == 3 and all(x >= 0 for x in f.split)
               and abs(sum(f.split) - 1.0) <= 1e-9, "forecast.split",
               "must be three non-negative fractions summing to 1")
        _check(set(f.models) <= set(MODELS) and f.models, "forecast.models",
               f"must be a non-empty subset of {list(MODELS)}")
        _check(isinstance(f.predictors, list) or f.predictors == "auto", "forecast.predictors",
               "must be a list of coins or 'auto'")
        if isinstance(f.predictors, list):
            _check(len(f.predictors) > 0, "forecast.predictors", "is empty")
            _check(f.target not in f.predictors, "forecast.predictors", "contains the target")
        c = self.causality
        _check(c.direction in ("forward", "reverse"), "causality.direction",
               "must be 'forward' or 'reverse'")
        _check(c.source in ("minute", "daily"), "causality.source", "must be 'minute' or 'daily'")
        _check(c.resample in ("daily", "none"), "causality.resample", "must be 'daily' or 'none'")
        _check(c.p_max >= 1 and c.d_max >= 0, "causality.p_max", "needs p_max >= 1, d_max >= 0")
        _check(self.correlation.mode in ("ohlc", "per_variable"), "correlation.mode",
               "must be 'ohlc' or 'per_variable'")
        g = self.gbt
        _check(g.learning_rate == "grid" or _positive(g.learning_rate), "gbt.learning_rate",
               "must be a positive number or 'grid'")
        _check(g.folds >= 2, "gbt.folds", "must be >= 2")
        r = self.rnn
        _check(r.learning_rate == "auto" or _positive(r.learning_rate), "rnn.learning_rate",
               "must be a positive number or 'auto'")
        _check(r.bptt_window >= 2, "rnn.bptt_window", "must be >= 2")
        return self

    def require_file(self, key: str) -> str:
        """Return ``data.<key>`` after checking the file exists."""
        path = getattr(self.data, key)
        if not path:
            raise ConfigError(f"data.{key}: no file configured")
        if not os.path.exists(path):
            raise ConfigError(f"data.{key}: file not found: {path}")
        return path


def _positive(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def _check(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {msg}")


def _build(cls, values: dict, prefix: str = ""):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"{prefix}{key}: unknown config key")
        sub = _SECTIONS.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, val, f"{key}.") if sub else val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


_SECTIONS = {"data": DataConfig, "correlation": CorrelationConfig, "causality": CausalityConfig,
             "forecast": ForecastConfig, "gbt": GbtConfig, "rnn": RnnTrainConfig}


def apply_override(tree: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (value parsed as YAML) to a raw config mapping."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse {raw!r}") from exc
    parts = key.strip().split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {part} is not a section")
    node[parts[-1]] = value


def load_config(path: str | os.PathLike | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    tree: dict[str, Any] = {}
    base = os.getcwd()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        base = os.path.dirname(os.path.abspath(path))
    for assignment in overrides or []:
        apply_override(tree, assignment)
    cfg = _build(RunConfig, tree)
    for key in ("minute", "daily"):
        p = getattr(cfg.data, key)
        if p and not os.path.isabs(p):
            setattr(cfg.data, key, os.path.normpath(os.path.join(base, p)))
    if path is not None and not os.path.isabs(cfg.out_dir) and "out_dir" in tree:
        cfg.out_dir = os.path.normpath(os.path.join(base, cfg.out_dir))
    return cfg.validate()


def dump_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
