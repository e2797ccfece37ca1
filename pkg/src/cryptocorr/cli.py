"""Command-line interface: ``cryptocorr <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 missing model,
1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Callable

import pandas as pd

from . import correlation, forecast, ingest, stationarity, var_granger
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, CryptoCorrError, DataError, ModelFileError
from .forecast import StageError, TrainedModels

log = logging.getLogger("cryptocorr")

MODEL_DIR = "models"


def _path(cfg: RunConfig, *parts: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, *parts)


def _daily_records(cfg: RunConfig):
    return ingest.load_daily_ohlcv(cfg.require_file("daily"), cfg.data.exclude)


def _minute_series(cfg: RunConfig) -> list[ingest.PriceSeries]:
    excluded = set(cfg.data.exclude)
    return [s for s in ingest.load_minute_closes(cfg.require_file("minute"))
            if s.coin not in excluded]


def causality_panel(cfg: RunConfig) -> ingest.AlignedPanel:
    """Panel used by stationarity, causality and predictor selection."""
    c = cfg.causality
    if c.source == "daily":
        return ingest.daily_panel(_daily_records(cfg))
    series = _minute_series(cfg)
    if c.resample == "daily":
        return ingest.align_panel([ingest.resample_daily(s) for s in series],
                                  ingest.Resolution.DAILY)
    return ingest.align_panel(series, ingest.Resolution.MINUTE)


def _require_coins(panel: ingest.AlignedPanel, coins, key: str) -> None:
    missing = [c for c in coins if c not in panel.coins]
    if missing:
        raise ConfigError(f"{key}: coins not in data: {missing}")


def cmd_ingest(cfg: RunConfig) -> list[str]:
    if not (cfg.data.daily or cfg.data.minute):
        raise ConfigError("data: neither data.daily nor data.minute is configured")
    written = []
    if cfg.data.daily:
        path = _path(cfg, "daily_panel.csv")
        ingest.write_panel_csv(ingest.daily_panel(_daily_records(cfg)), path)
        written.append(path)
    if cfg.data.minute:
        path = _path(cfg, "minute_panel.csv")
        ingest.write_panel_csv(ingest.align_panel(_minute_series(cfg), "minute"), path)
        written.append(path)
    return written


def cmd_correlate(cfg: RunConfig) -> list[str]:
    c = cfg.correlation
    records = _daily_records(cfg)
    if c.mode == "ohlc":
        panels = {"ohlc": ingest.daily_panel(records)}
    else:
        panels = {f: ingest.daily_panel(records, f)
                  for f in ("open", "high", "low", "close", "volume")}
    panel = next(iter(panels.values()))
    if len(panel.coins) < 2:
        raise DataError(f"correlation needs at least 2 coins, got {list(panel.coins)}")
    _require_coins(panel, c.maincoins, "correlation.maincoins")
    specs = {}
    for name in c.regimes:
        try:
            specs[name] = correlation.regime_spec(name)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"correlation.regimes: {exc}") from exc
    written = []
    for name, spec in specs.items():
        entries = []
        for main in c.maincoins:
            if c.mode == "ohlc":
                found = correlation.panel_correlations(panels["ohlc"], main, spec, name)
            else:
                found = correlation.per_variable_correlations(panels, main, spec, name)
            entries.extend(e for e in found if e.altcoin not in c.maincoins)
        path = _path(cfg, f"correlogram_{name}.csv")
        correlation.write_correlogram_csv(entries, path)
        written.append(path)
    alts = c.trend_altcoins
    if alts is None:
        alts = [x for x in panel.coins if x not in c.maincoins]
    _require_coins(panel, alts, "correlation.trend_altcoins")
    for main in c.maincoins:
        for alt in alts:
            trend = correlation.cumulative_trend(panel.series(alt), panel.series(main))
            path = _path(cfg, f"trend_{alt}_{main}.csv")
            correlation.write_trend_csv(trend, path)
            written.append(path)
    return written


def cmd_stationarity(cfg: RunConfig) -> list[str]:
    panel = causality_panel(cfg)
    orders = {coin: stationarity.integration_order(panel.column(coin), cfg.causality.d_max)
              for coin in panel.coins}
    path = _path(cfg, "stationarity.csv")
    stationarity.write_stationarity_csv(orders, path)
    return [path]


def _granger_pairs(cfg: RunConfig, panel: ingest.AlignedPanel) -> list[tuple[str, str]]:
    c = cfg.causality
    _require_coins(panel, c.maincoins, "causality.maincoins")
    alts = c.altcoins if c.altcoins is not None else [x for x in panel.coins
                                                       if x not in c.maincoins]
    _require_coins(panel, alts, "causality.altcoins")
    if not alts:
        raise DataError("causality: no altcoins to test")
    pairs = []
    for main in c.maincoins:
        for alt in alts:
            pairs.append((alt, main) if c.direction == "forward" else (main, alt))
    return pairs


def cmd_causality(cfg: RunConfig) -> list[str]:
    panel = causality_panel(cfg)
    results = var_granger.granger_pairs(panel, _granger_pairs(cfg, panel), cfg.causality.p_max,
                                        cfg.causality.d_max, cfg.jobs)
    for res in results:
        if not isinstance(res, var_granger.GrangerResult):
            log.warning("pair %s -> %s flagged: %s", *res)
    path = _path(cfg, "granger.csv")
    var_granger.write_granger_csv(results, path)
    return [path]


def _screen(cfg: RunConfig) -> list[forecast.PredictorScreen]:
    f, c = cfg.forecast, cfg.causality
    panel = causality_panel(cfg)
    _require_coins(panel, [f.target], "forecast.target")
    candidates = [x for x in panel.coins if x not in c.maincoins and x != f.target]
    if not candidates:
        raise DataError("select-predictors: no candidate altcoins")
    return forecast.select_predictors(panel, f.target, candidates, f.threshold, c.p_max,
                                      c.d_max, cfg.jobs)


def resolve_predictors(cfg: RunConfig) -> list[str]:
    if isinstance(cfg.forecast.predictors, list):
        return list(cfg.forecast.predictors)
    chosen = [s.coin for s in _screen(cfg) if s.selected]
    if not chosen:
        raise DataError(f"select-predictors: no altcoin passed the screen for {cfg.forecast.target}")
    return chosen


def cmd_select_predictors(cfg: RunConfig) -> list[str]:
    screens = _screen(cfg)
    path = _path(cfg, "predictors.csv")
    forecast.write_screen_csv(screens, path)
    log.info("selected predictors: %s", [s.coin for s in screens if s.selected])
    return [path]


def _model_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.out_dir, MODEL_DIR)


def cmd_train(cfg: RunConfig) -> list[str]:
    predictors = resolve_predictors(cfg)
    panel = forecast.load_forecast_panel(cfg, [cfg.forecast.target, *predictors])
    models = forecast.train_models(cfg, panel, predictors)
    models.save(_model_dir(cfg))
    dump_config(cfg, _path(cfg, "config.yaml"))
    return [_model_dir(cfg)]


def _load_models(cfg: RunConfig) -> TrainedModels:
    models = TrainedModels.load(_model_dir(cfg))
    if models.target != cfg.forecast.target:
        raise ConfigError(f"forecast.target: config names {cfg.forecast.target} but the "
                          f"trained models forecast {models.target}")
    if models.lag != cfg.forecast.lag:
        raise ConfigError(f"forecast.lag: config has {cfg.forecast.lag} but the models were "
                          f"trained with {models.lag}")
    return models


def _test_predictions(cfg: RunConfig):
    models = _load_models(cfg)
    panel = forecast.load_forecast_panel(cfg, [models.target, *models.predictors])
    test, preds = forecast.predict_test(models, panel)
    snapshot = cfg.to_dict()
    snapshot["forecast"]["predictors"] = list(models.predictors)
    return forecast.evaluate(models, test, preds, snapshot)


def cmd_predict(cfg: RunConfig) -> list[str]:
    report = _test_predictions(cfg)
    path = _path(cfg, "predictions.csv")
    report.predictions_frame().to_csv(path, index=False, float_format="%.17g",
                                      lineterminator="\n")
    return [path]


def cmd_evaluate(cfg: RunConfig) -> list[str]:
    report = _test_predictions(cfg)
    report.write(cfg.out_dir)
    sys.stdout.write(report.to_text())
    return [_path(cfg, n) for n in ("report.json", "report.txt", "predictions.csv")]


def cmd_report(cfg: RunConfig) -> list[str]:
    """Collect the tables already present in the output directory into one summary."""
    sections = []
    for name in sorted(os.listdir(cfg.out_dir)) if os.path.isdir(cfg.out_dir) else []:
        if name.startswith("correlogram_") and name.endswith(".csv"):
            frame = pd.read_csv(os.path.join(cfg.out_dir, name))
            regime = name[len("correlogram_"):-4]
            lines = [f"{m}: mean r = {g['r'].mean():.3f} over {g['r'].notna().sum()} altcoins"
                     for m, g in frame.groupby("maincoin", sort=True)]
            sections.append((f"Correlation ({regime})", "\n".join(lines)))
    for title, name in (("Stationarity", "stationarity.csv"), ("Granger causality", "granger.csv"),
                        ("Predictor screen", "predictors.csv")):
        path = os.path.join(cfg.out_dir, name)
        if os.path.exists(path):
            with open(path) as fh:
                sections.append((title, fh.read().rstrip()))
    path = os.path.join(cfg.out_dir, "report.txt")
    if os.path.exists(path):
        with open(path) as fh:
            sections.append(("Forecast", fh.read().rstrip()))
    if not sections:
        raise DataError(f"{cfg.out_dir}: no results to report; run the other commands first")
    out = _path(cfg, "summary.txt")
    with open(out, "w") as fh:
        fh.write("\n\n".join(f"== {t} ==\n{body}" for t, body in sections) + "\n")
    return [out]


COMMANDS: dict[str, Callable[[RunConfig], list[str]]] = {
    "ingest": cmd_ingest,
    "correlate": cmd_correlate,
    "stationarity": cmd_stationarity,
    "causality": cmd_causality,
    "select-predictors": cmd_select_predictors,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cryptocorr", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="YAML run configuration")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--jobs", type=int, help="maximum worker processes")
    ap.add_argument("--out-dir", help="output directory (relative to the current directory)")
    ap.add_argument("--target", help="forecast target coin")
    ap.add_argument("--lag", type=int, help="features at t - LAG predict the target at t")
    ap.add_argument("--direction", choices=["forward", "reverse"],
                    help="forward tests altcoin -> maincoin, reverse maincoin -> altcoin")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key, e.g. --set gbt.folds=5")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("target", "forecast.target"),
                      ("lag", "forecast.lag"), ("direction", "causality.direction")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = load_config(args.config, overrides)
    if args.out_dir is not None:
        cfg.out_dir = os.path.abspath(args.out_dir)
    return cfg


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, ModelFileError):
        return 4
    if isinstance(exc, (DataError, ValueError, ArithmeticError)):
        return 3
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        written = COMMANDS[args.command](cfg)
    except (CryptoCorrError, OSError) as exc:
        print(f"cryptocorr {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc) if isinstance(exc, CryptoCorrError) else 3
    for path in written:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
