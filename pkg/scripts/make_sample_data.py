"""Generate the bundled synthetic datasets in data/.

* sample_minute.csv: 6 coins, 5,000 minutes. BTC follows the lagged average of
  ADA and LTC; BNB is a noisy copy of BTC (correlated, but with no extra
  predictive content); ETH and XRP share only the common market factor.
* null_minute.csv: BTC as above but every predictor is independent noise.
* sample_daily.csv: 400 days of OHLCV candles for 8 coins plus a USDT
  stablecoin pinned near 1.

Run from the repository root: ``python scripts/make_sample_data.py``.
"""

from __future__ import annotations

import argparse
import os

import numpy as np
import pandas as pd

MINUTE_COINS = ["BTC", "ETH", "ADA", "BNB", "LTC", "XRP"]
DAILY_COINS = ["BTC", "ETH", "ADA", "BNB", "LTC", "XRP", "DOGE", "TRX"]


def ar1(rng: np.random.Generator, n: int, phi: float, scale: float) -> np.ndarray:
    out = np.empty(n)
    x = 0.0
    shocks = rng.normal(0.0, scale, n)
    for t in range(n):
        x = phi * x + shocks[t]
        out[t] = x
    return out


def planted_minute(rng: np.random.Generator, n: int, null: bool = False) -> pd.DataFrame:
    factor = ar1(rng, n + 1, 0.995, 0.02)
    alt = {c: 100.0 * np.exp(factor + ar1(rng, n + 1, 0.98, 0.02))
           for c in ("ETH", "ADA", "LTC", "XRP")}
    btc = np.empty(n + 1)
    btc[0] = 300.0 * (alt["ADA"][0] + alt["LTC"][0]) / 2
    btc[1:] = 300.0 * 0.5 * (alt["ADA"][:-1] + alt["LTC"][:-1]) + rng.normal(0.0, 30.0, n)
    prices = {"BTC": btc, **alt, "BNB": btc / 100.0 + rng.normal(0.0, 0.5, n + 1)}
    if null:
        for c in ("ETH", "ADA", "BNB", "LTC", "XRP"):
            prices[c] = 100.0 + rng.normal(0.0, 1.0, n + 1)
    stamps = np.datetime64("2021-03-01T00:00:00") + np.arange(n) * np.timedelta64(1, "m")
    text = [str(t) + "Z" for t in stamps]
    frames = [pd.DataFrame({"coin": c, "timestamp": text, "close": prices[c][1:]})
              for c in MINUTE_COINS]
    return pd.concat(frames, ignore_index=True)


def daily_candles(rng: np.random.Generator, days: int) -> pd.DataFrame:
    factor = np.cumsum(rng.normal(0.0, 0.03, days))
    dates = (np.datetime64("2020-01-01") + np.arange(days)).astype(str)
    rows = []
    for i, coin in enumerate(DAILY_COINS):
        beta = 0.6 + 0.1 * i if coin != "TRX" else 0.1
        log_close = beta * factor + np.cumsum(rng.normal(0.0, 0.02, days)) + np.log(10.0 + 50 * i)
        rows.append((coin, np.exp(log_close)))
    rows.append(("USDT", 1.0 + rng.normal(0.0, 0.001, days)))
    frames = []
    for coin, close in rows:
        open_ = np.concatenate([[close[0]], close[:-1]])
        wiggle = np.abs(rng.normal(0.0, 0.01, (2, days)))
        high = np.maximum(open_, close) * (1 + wiggle[0])
        low = np.minimum(open_, close) * (1 - wiggle[1])
        volume = rng.lognormal(15.0, 0.5, days)
        frames.append(pd.DataFrame({"coin": coin, "date": dates, "open": open_, "high": high,
                                    "low": low, "close": close, "volume": volume}))
    return pd.concat(frames, ignore_index=True)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--days", type=int, default=400)
    ap.add_argument("--seed", type=int, default=20210302)
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).spawn(3)
    kw = dict(index=False, float_format="%.8f", lineterminator="\n")
    planted_minute(np.random.default_rng(seeds[0]), args.steps).to_csv(
        os.path.join(args.out, "sample_minute.csv"), **kw)
    planted_minute(np.random.default_rng(seeds[1]), args.steps, null=True).to_csv(
        os.path.join(args.out, "null_minute.csv"), **kw)
    daily_candles(np.random.default_rng(seeds[2]), args.days).to_csv(
        os.path.join(args.out, "sample_daily.csv"), **kw)


if __name__ == "__main__":
    main()
