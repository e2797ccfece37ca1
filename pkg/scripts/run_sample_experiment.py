"""Run the full forecasting experiment on a config and print the comparison table.

Predictors set to ``auto`` are resolved with the correlation and Granger
screen first. Outputs go to the config's ``out_dir``.

    python scripts/run_sample_experiment.py configs/sample.yaml
    python scripts/run_sample_experiment.py configs/null.yaml --set rnn.max_epochs=50
"""

import argparse
import logging
import time

from cryptocorr.cli import resolve_predictors
from cryptocorr.config import dump_config, load_config
from cryptocorr.forecast import run_experiment


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = load_config(args.config, args.set)
    start = time.perf_counter()
    predictors = resolve_predictors(cfg)
    report = run_experiment(cfg, predictors=predictors)
    report.write(cfg.out_dir)
    dump_config(cfg, f"{cfg.out_dir}/config.yaml")
    print(report.to_text(), end="")
    for name in ("gbt", "lstm", "gru"):
        if name in report.metrics:
            print(f"{name}: {100 * report.improvement_over(name):.1f}% lower RMSE than the mean baseline")
    print(f"finished in {time.perf_counter() - start:.0f}s; outputs in {cfg.out_dir}")


if __name__ == "__main__":
    main()
