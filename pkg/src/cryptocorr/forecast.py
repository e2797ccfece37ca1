"""Forecasting experiments: splits, scaling, baselines, metrics and orchestration."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import ingest
from .config import RunConfig
from .correlation import pearson
from .errors import (ConfigError, CryptoCorrError, DataError, InsufficientDataError,
                     ModelFileError, ZeroVarianceError)
from .gbt import GbtModel, fit_gbt, grid_search_lr
from .history import TrainHistory
from .ingest import AlignedPanel, format_timestamps
from .rnn import RnnConfig, RnnModel, fit_rnn, rnn_lr_range_test, rnn_predict
from .var_granger import GrangerResult, granger_pairs

log = logging.getLogger(__name__)

BASELINES = ("mean", "median")
PREDICTION_COLUMNS = ["timestamp", "truth", "gbt", "lstm", "gru", "mean", "median"]


class MapeUndefinedWarning(RuntimeWarning):
    pass


class StageError(CryptoCorrError):
    """Wraps a failure inside ``run_experiment`` with the pipeline stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

    def __reduce__(self):
        return type(self), (self.stage, self.cause)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        fr = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be >= 0 and sum to 1, got {fr}")

    def sizes(self, n: int) -> tuple[int, int, int]:
        """Validation and test take ``floor(fraction * n)``; train keeps the rest."""
        n_val = math.floor(self.validation_fraction * n)
        n_test = math.floor(self.test_fraction * n)
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) <= 0:
            raise InsufficientDataError(
                f"split {n_train}/{n_val}/{n_test} of {n} rows leaves an empty slice")
        return n_train, n_val, n_test


def chronological_split(panel: AlignedPanel, spec: SplitSpec
                        ) -> tuple[AlignedPanel, AlignedPanel, AlignedPanel]:
    n = panel.n_steps
    if n < 10:
        raise InsufficientDataError(f"need at least 10 rows to split, got {n}")
    n_train, n_val, _ = spec.sizes(n)
    a, b = n_train, n_train + n_val
    return panel.slice_rows(0, a), panel.slice_rows(a, b), panel.slice_rows(b, n)


@dataclass(frozen=True)
class Standardizer:
    coins: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, panel: AlignedPanel) -> "Standardizer":
        if panel.n_steps == 0:
            raise DataError("cannot standardize an empty training slice")
        mean = panel.matrix.mean(axis=0)
        std = panel.matrix.std(axis=0)
        for coin, s in zip(panel.coins, std):
            if not s > 0:
                raise ZeroVarianceError(f"column {coin} has zero variance in the training slice")
        return cls(panel.coins, mean, std)

    def _cols(self, coins: Sequence[str] | None):
        if coins is None:
            return slice(None)
        return [self.coins.index(c) for c in coins]

    def transform(self, matrix, coins: Sequence[str] | None = None) -> np.ndarray:
        idx = self._cols(coins)
        return (np.asarray(matrix, dtype=float) - self.mean[idx]) / self.std[idx]

    def inverse(self, matrix, coins: Sequence[str] | None = None) -> np.ndarray:
        idx = self._cols(coins)
        return np.asarray(matrix, dtype=float) * self.std[idx] + self.mean[idx]

    def apply(self, panel: AlignedPanel) -> AlignedPanel:
        return panel.with_matrix(self.transform(panel.matrix, panel.coins))

    def to_dict(self) -> dict:
        return {"coins": list(self.coins), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(tuple(d["coins"]), np.array(d["mean"], dtype=float),
                   np.array(d["std"], dtype=float))


def standardize(train: AlignedPanel, *others: AlignedPanel
                ) -> tuple[list[AlignedPanel], Standardizer]:
    """Scale every slice with the training slice's column means and standard deviations."""
    scaler = Standardizer.fit(train)
    return [scaler.apply(p) for p in (train, *others)], scaler


def baseline_predict(kind: str, train_targets, horizon: int) -> np.ndarray:
    y = np.asarray(train_targets, dtype=float)
    if y.size == 0:
        raise DataError("baseline needs training targets")
    if kind == "mean":
        value = float(np.mean(y))
    elif kind == "median":
        value = float(np.median(y))
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return np.full(int(horizon), value)


@dataclass(frozen=True)
class ForecastMetrics:
    mse: float
    rmse: float
    mae: float
    mape: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, truth) -> ForecastMetrics:
    """MSE, RMSE, MAE and MAPE (as a fraction).

    If any truth value is zero, MAPE is ``nan`` and a ``MapeUndefinedWarning``
    is issued; the other metrics are still returned.
    """
    pred = np.asarray(predictions, dtype=float)
    y = np.asarray(truth, dtype=float)
    if pred.shape != y.shape or pred.ndim != 1 or y.size == 0:
        raise ValueError(f"predictions {pred.shape} and truth {y.shape} must be equal non-empty vectors")
    err = pred - y
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    if np.any(y == 0):
        warnings.warn("MAPE undefined: truth contains zeros", MapeUndefinedWarning)
        mape = float("nan")
    else:
        mape = float(np.mean(np.abs(err / y)))
    return ForecastMetrics(mse, math.sqrt(mse), mae, mape)


@dataclass
class Dataset:
    """Feature/target arrays with their timestamps, in original units."""

    timestamps: np.ndarray
    features: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.targets.size

    def rows(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.timestamps[start:stop], self.features[start:stop],
                       self.targets[start:stop])


def build_dataset(panel: AlignedPanel, target: str, predictors: Sequence[str],
                  lag: int = 0) -> Dataset:
    """Features at step ``t - lag`` paired with the target at step ``t``."""
    if not predictors:
        raise ConfigError("forecast.predictors: predictor set is empty")
    if lag < 0:
        raise ValueError("lag must be >= 0")
    x = np.column_stack([panel.column(c) for c in predictors])
    y = panel.column(target)
    n = panel.n_steps
    if lag >= n - 1:
        raise InsufficientDataError(f"lag {lag} leaves no rows")
    return Dataset(panel.timestamps[lag:], x[:n - lag], y[lag:])


@dataclass
class TrainedModels:
    target: str
    predictors: list[str]
    lag: int
    split: SplitSpec
    scaler: Standardizer
    gbt: GbtModel | None = None
    rnns: dict[str, RnnModel] = field(default_factory=dict)
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    learning_rates: dict[str, float] = field(default_factory=dict)
    baselines: dict[str, float] = field(default_factory=dict)

    @property
    def model_names(self) -> list[str]:
        return (["gbt"] if self.gbt is not None else []) + [c for c in ("lstm", "gru") if c in self.rnns]

    def save(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        manifest = {
            "target": self.target, "predictors": self.predictors, "lag": self.lag,
            "split": asdict(self.split), "scaler": self.scaler.to_dict(),
            "models": self.model_names, "learning_rates": self.learning_rates,
            "baselines": self.baselines,
            "histories": {k: h.to_dict() for k, h in self.histories.items()},
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)
        if self.gbt is not None:
            self.gbt.save(os.path.join(directory, "gbt.json"))
        for name, model in self.rnns.items():
            model.save(os.path.join(directory, f"{name}.json"))
        for name, hist in self.histories.items():
            hist.write_csv(os.path.join(directory, f"history_{name}.csv"))

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TrainedModels":
        path = os.path.join(directory, "manifest.json")
        if not os.path.exists(path):
            raise ModelFileError(f"no trained models in {directory} (missing manifest.json)")
        with open(path) as fh:
            m = json.load(fh)
        out = cls(m["target"], list(m["predictors"]), int(m["lag"]), SplitSpec(**m["split"]),
                  Standardizer.from_dict(m["scaler"]), learning_rates=m["learning_rates"],
                  baselines=m["baselines"],
                  histories={k: TrainHistory.from_dict(h) for k, h in m["histories"].items()})
        for name in m["models"]:
            file = os.path.join(directory, f"{name}.json")
            if name == "gbt":
                out.gbt = GbtModel.load(file)
            else:
                out.rnns[name] = RnnModel.load(file)
        return out


@dataclass
class ForecastReport:
    target: str
    predictors: list[str]
    metrics: dict[str, ForecastMetrics]
    predictions: dict[str, np.ndarray]
    truth: np.ndarray
    timestamps: np.ndarray
    config: dict = field(default_factory=dict)
    learning_rates: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, int] = field(default_factory=dict)

    def improvement_over(self, model: str, baseline: str = "mean") -> float:
        return 1.0 - self.metrics[model].rmse / self.metrics[baseline].rmse

    def to_dict(self) -> dict:
        return {
            "target": self.target, "predictors": self.predictors,
            "test_rows": int(self.truth.size),
            "test_start": format_timestamps(self.timestamps[:1])[0],
            "test_end": format_timestamps(self.timestamps[-1:])[0],
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "learning_rates": self.learning_rates, "checkpoints": self.checkpoints,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"Forecast of {self.target} from {', '.join(self.predictors)} "
                 f"({self.truth.size} test rows)",
                 f"{'Model':<8} {'MSE':>16} {'RMSE':>12} {'MAE':>12} {'MAPE':>8}"]
        for name, m in self.metrics.items():
            lines.append(f"{name:<8} {m.mse:>16,.4f} {m.rmse:>12,.4f} {m.mae:>12,.4f} {m.mape:>8.4f}")
        return "\n".join(lines) + "\n"

    def predictions_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"timestamp": format_timestamps(self.timestamps), "truth": self.truth})
        for col in PREDICTION_COLUMNS[2:]:
            frame[col] = self.predictions.get(col, np.full(self.truth.size, np.nan))
        return frame

    def write(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "report.json"), "w") as fh:
            fh.write(self.to_json())
        with open(os.path.join(directory, "report.txt"), "w") as fh:
            fh.write(self.to_text())
        self.predictions_frame().to_csv(os.path.join(directory, "predictions.csv"), index=False,
                                        float_format="%.17g", lineterminator="\n")


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            log.info("stage %s", name)

        def __exit__(self, typ, exc, tb):
            if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
                raise StageError(name, exc) from exc
            return False
    return _Ctx()


def _splits(data: Dataset, split: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    n = len(data)
    if n < 10:
        raise InsufficientDataError(f"need at least 10 rows to split, got {n}")
    n_train, n_val, _ = split.sizes(n)
    a, b = n_train, n_train + n_val
    return data.rows(0, a), data.rows(a, b), data.rows(b, n)


def _scaled(scaler: Standardizer, d: Dataset, target: str, predictors: Sequence[str]):
    return scaler.transform(d.features, predictors), scaler.transform(d.targets, [target])


def _train_one(name: str, cfg: RunConfig, xt, yt, xv, yv):
    """Fit one model; a pure function of its inputs so it can run in a worker process."""
    with _stage(name):
        if name == "gbt":
            g = cfg.gbt
            tree_kw = dict(max_iterations=g.max_iterations, patience=g.patience,
                           max_depth=g.max_depth, min_node_size=g.min_node_size)
            lr = g.learning_rate
            if lr == "grid":
                lr, _ = grid_search_lr(xt, yt, g.candidate_rates, g.folds, **tree_kw)
            model, hist = fit_gbt((xt, yt), (xv, yv), float(lr), **tree_kw)
        else:
            r = cfg.rnn
            rc = RnnConfig(name, r.depth, r.width, xt.shape[1], r.bptt_window, r.batch_size,
                           cfg.seed)
            lr = r.learning_rate
            if lr == "auto":
                lr = rnn_lr_range_test(rc, (xt, yt), r.lr_start, r.lr_growth)
            model, hist = fit_rnn(rc, (xt, yt), (xv, yv), float(lr), r.max_epochs,
                                  r.patience, r.clip_norm)
    return model, hist, float(lr)


def train_models(cfg: RunConfig, panel: AlignedPanel, predictors: Sequence[str]) -> TrainedModels:
    """Fit every configured model on the train/validation slices of ``panel``."""
    f = cfg.forecast
    split = SplitSpec(*f.split)
    with _stage("standardize"):
        data = build_dataset(panel, f.target, predictors, f.lag)
        train, val, _ = _splits(data, split)
        cols = [f.target, *predictors]
        train_panel = AlignedPanel(tuple(cols), train.timestamps,
                                   np.column_stack([train.targets, train.features]),
                                   panel.resolution)
        scaler = Standardizer.fit(train_panel)
        xt, yt = _scaled(scaler, train, f.target, predictors)
        xv, yv = _scaled(scaler, val, f.target, predictors)
    out = TrainedModels(f.target, list(predictors), f.lag, split, scaler,
                        baselines={"mean": float(np.mean(train.targets)),
                                   "median": float(np.median(train.targets))})

    names = [m for m in ("gbt", "lstm", "gru") if m in f.models]
    args = [(name, cfg, xt, yt, xv, yv) for name in names]
    if cfg.jobs > 1 and len(names) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(names))) as pool:
            results = list(pool.map(_train_one, *zip(*args)))
    else:
        results = [_train_one(*a) for a in args]
    for name, (model, hist, lr) in zip(names, results):
        if name == "gbt":
            out.gbt = model
        else:
            out.rnns[name] = model
        out.histories[name], out.learning_rates[name] = hist, lr
    return out


def predict_test(models: TrainedModels, panel: AlignedPanel) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Predictions in original units on the test slice, plus the slice itself.

    RNNs are warmed up on the validation slice's features before the test rows.
    """
    data = build_dataset(panel, models.target, models.predictors, models.lag)
    _, val, test = _splits(data, models.split)
    xv, _ = _scaled(models.scaler, val, models.target, models.predictors)
    xs, _ = _scaled(models.scaler, test, models.target, models.predictors)
    preds = {}
    if models.gbt is not None:
        preds["gbt"] = models.scaler.inverse(models.gbt.predict(xs), [models.target])
    for name, model in models.rnns.items():
        preds[name] = models.scaler.inverse(rnn_predict(model, xs, warmup=xv), [models.target])
    for kind in BASELINES:
        preds[kind] = np.full(len(test), models.baselines[kind])
    return test, preds


def evaluate(models: TrainedModels, test: Dataset, preds: dict[str, np.ndarray],
             config: dict | None = None) -> ForecastReport:
    metrics = {}
    for name in models.model_names + list(BASELINES):
        if preds[name].shape != test.targets.shape:
            raise DataError(f"{name} predictions do not cover the test slice")
        metrics[name] = compute_metrics(preds[name], test.targets)
    checkpoints = {k: int(h.checkpoint_iteration) for k, h in models.histories.items()}
    return ForecastReport(models.target, list(models.predictors), metrics, preds, test.targets,
                          test.timestamps, config or {}, dict(models.learning_rates), checkpoints)


@dataclass(frozen=True)
class PredictorScreen:
    coin: str
    r: float
    p_value: float
    selected: bool
    reason: str


def select_predictors(panel: AlignedPanel, target: str, candidates: Sequence[str],
                      threshold: float = 0.6, p_max: int = 10, d_max: int = 2,
                      jobs: int = 1) -> list[PredictorScreen]:
    """Keep candidates with ``r >= threshold`` against ``target`` whose
    Toda-Yamamoto test rejects "candidate does not Granger-cause target" at 5%."""
    screens = []
    passed = []
    y = panel.column(target)
    for coin in candidates:
        try:
            r = pearson(panel.column(coin), y)
        except ZeroVarianceError:
            r = float("nan")
        if r >= threshold:
            passed.append(coin)
        screens.append([coin, r])
    results = dict(zip(passed, granger_pairs(panel, [(c, target) for c in passed], p_max, d_max,
                                             jobs)))
    out = []
    for coin, r in screens:
        res = results.get(coin)
        if res is None:
            out.append(PredictorScreen(coin, r, float("nan"), False, "correlation below threshold"))
        elif not isinstance(res, GrangerResult):
            out.append(PredictorScreen(coin, r, float("nan"), False, res[2]))
        elif res.reject_at_5pct:
            out.append(PredictorScreen(coin, r, res.p_value, True, "selected"))
        else:
            out.append(PredictorScreen(coin, r, res.p_value, False, "no Granger causality"))
    return out


def write_screen_csv(screens: Sequence[PredictorScreen], path: str | os.PathLike) -> None:
    pd.DataFrame([asdict(s) for s in screens],
                 columns=["coin", "r", "p_value", "selected", "reason"]).to_csv(
        path, index=False, float_format="%.10g", lineterminator="\n")


def load_forecast_panel(cfg: RunConfig, coins: Sequence[str]) -> AlignedPanel:
    path = cfg.require_file("minute")
    series = {s.coin: s for s in ingest.load_minute_closes(path)}
    missing = [c for c in coins if c not in series]
    if missing:
        raise DataError(f"{path}: coins not found: {missing}")
    return ingest.align_panel([series[c] for c in coins], ingest.Resolution.MINUTE)


def run_experiment(cfg: RunConfig, panel: AlignedPanel | None = None,
                   predictors: Sequence[str] | None = None) -> ForecastReport:
    """Ingest, align, split, scale, train, predict and score every model and baseline.

    ``predictors`` overrides ``cfg.forecast.predictors`` (needed when that is
    ``'auto'``); ``panel`` skips file loading.
    """
    f = cfg.forecast
    if predictors is None:
        if not isinstance(f.predictors, list):
            raise ConfigError("forecast.predictors: resolve 'auto' before run_experiment")
        predictors = f.predictors
    predictors = list(predictors)
    if not predictors:
        raise ConfigError("forecast.predictors: predictor set is empty")
    with _stage("ingest"):
        if panel is None:
            panel = load_forecast_panel(cfg, [f.target, *predictors])
        else:
            panel = panel.select([f.target, *predictors])
    models = train_models(cfg, panel, predictors)
    with _stage("predict"):
        test, preds = predict_test(models, panel)
    snapshot = cfg.to_dict()
    snapshot["forecast"]["predictors"] = predictors
    return evaluate(models, test, preds, snapshot)
