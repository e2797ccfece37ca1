"""Simulate null distributions of the ADF (constant) and KPSS (level) statistics.

Prints the lower ADF quantiles and upper KPSS quantiles at T in {100, 500};
the results are frozen into ``cryptocorr.stationarity``.

    python scripts/calibrate_critical_values.py --reps 200000
"""

import argparse
import math

import numpy as np

LEVELS = (0.01, 0.025, 0.05, 0.10)


def adf_stats(y: np.ndarray) -> np.ndarray:
    """Dickey-Fuller t-ratio, constant only, zero augmentation lags; rows are replications."""
    dy = np.diff(y, axis=1)
    x = y[:, :-1]
    n = dy.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    dyc = dy - dy.mean(axis=1, keepdims=True)
    sxx = np.einsum("ij,ij->i", xc, xc)
    beta = np.einsum("ij,ij->i", xc, dyc) / sxx
    resid = dyc - beta[:, None] * xc
    s2 = np.einsum("ij,ij->i", resid, resid) / (n - 2)
    return beta / np.sqrt(s2 / sxx)


def kpss_stats(y: np.ndarray) -> np.ndarray:
    t = y.shape[1]
    lags = math.floor(4 * (t / 100) ** 0.25)
    e = y - y.mean(axis=1, keepdims=True)
    s = np.cumsum(e, axis=1)
    lrv = np.einsum("ij,ij->i", e, e) / t
    for j in range(1, lags + 1):
        gamma = np.einsum("ij,ij->i", e[:, j:], e[:, :-j]) / t
        lrv += 2 * (1 - j / (lags + 1)) * gamma
    return np.einsum("ij,ij->i", s, s) / (t * t * lrv)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=20230226)
    ap.add_argument("--chunk", type=int, default=20_000)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    for t in (100, 500):
        adf, kpss = [], []
        done = 0
        while done < args.reps:
            m = min(args.chunk, args.reps - done)
            eps = rng.standard_normal((m, t))
            adf.append(adf_stats(np.cumsum(eps, axis=1)))
            kpss.append(kpss_stats(rng.standard_normal((m, t))))
            done += m
        adf = np.concatenate(adf)
        kpss = np.concatenate(kpss)
        print(f"T={t} reps={args.reps}")
        print("  ADF  ", {a: round(float(np.quantile(adf, a)), 4) for a in LEVELS})
        print("  KPSS ", {a: round(float(np.quantile(kpss, 1 - a)), 4) for a in LEVELS})


if __name__ == "__main__":
    main()
