"""ADF unit-root and KPSS level-stationarity tests, and integration order.

Critical values come from 200,000-replication simulations of each null at
T = 100 and T = 500 (``scripts/calibrate_critical_values.py``), anchored at
T = infinity by the published asymptotic values; other sample sizes are
interpolated linearly in 1/T.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import InsufficientDataError, ZeroVarianceError

LEVELS = (0.01, 0.025, 0.05, 0.10)
MIN_LENGTH = 20

# sample size -> critical values; math.inf rows are the asymptotic anchors
_ADF_CRITICAL = {
    100: (-3.4933, -3.1664, -2.8953, -2.5836),
    500: (-3.4464, -3.1240, -2.8615, -2.5684),
    math.inf: (-3.4304, -3.1200, -2.8615, -2.5668),
}
_KPSS_CRITICAL = {
    100: (0.6566, 0.5367, 0.4420, 0.3427),
    500: (0.7276, 0.5752, 0.4607, 0.3487),
    math.inf: (0.739, 0.574, 0.463, 0.347),
}


class TestKind(str, enum.Enum):
    ADF = "ADF"
    KPSS = "KPSS"


class Decision(str, enum.Enum):
    STATIONARY = "stationary"
    NON_STATIONARY = "non_stationary"


@dataclass(frozen=True)
class StationarityResult:
    test: TestKind
    statistic: float
    lags_used: int
    critical_values: Mapping[float, float]
    nobs: int

    @property
    def decision_5pct(self) -> Decision:
        cv = self.critical_values[0.05]
        # ADF rejects a unit root in the left tail; KPSS rejects stationarity in the right tail
        stationary = self.statistic < cv
        return Decision.STATIONARY if stationary else Decision.NON_STATIONARY

    @property
    def stationary(self) -> bool:
        return self.decision_5pct is Decision.STATIONARY


@dataclass(frozen=True)
class IntegrationOrder:
    d: int
    trace: list[tuple[StationarityResult, StationarityResult]] = field(default_factory=list)
    flagged: bool = False


def critical_values(test: TestKind | str, nobs: int) -> dict[float, float]:
    """Critical values at ``LEVELS`` for a series of ``nobs`` observations."""
    kind = TestKind(test)
    table = _ADF_CRITICAL if kind is TestKind.ADF else _KPSS_CRITICAL
    if kind is TestKind.KPSS and nobs < 100:
        # the KPSS quantiles are far from linear in 1/T below 100; hold the T=100 row
        nobs = 100
    inv = 1.0 / nobs
    if nobs >= 500:
        (x0, c0), (x1, c1) = (0.0, table[math.inf]), (1 / 500, table[500])
    else:
        # below 100 the ADF 100..500 slope is extrapolated
        (x0, c0), (x1, c1) = (1 / 500, table[500]), (1 / 100, table[100])
    w = (inv - x0) / (x1 - x0)
    return {lvl: a + w * (b - a) for lvl, a, b in zip(LEVELS, c0, c1)}


def _as_series(series) -> np.ndarray:
    y = np.asarray(series, dtype=float)
    if y.ndim != 1:
        raise ValueError("expected a 1-d series")
    if y.size < MIN_LENGTH:
        raise InsufficientDataError(f"need at least {MIN_LENGTH} observations, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    return y


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Least squares via QR; returns (beta, ssr, diagonal of (X'X)^-1)."""
    q, r = np.linalg.qr(x)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - x @ beta
    r_inv = np.linalg.solve(r, np.eye(r.shape[0]))
    return beta, float(resid @ resid), np.einsum("ij,ij->i", r_inv, r_inv)


def _adf_design(y: np.ndarray, k: int, start: int) -> tuple[np.ndarray, np.ndarray]:
    """Regression of dy_t on [1, y_{t-1}, dy_{t-1}, ..., dy_{t-k}] for dy indices >= start."""
    dy = np.diff(y)
    n = dy.size - start
    cols = [np.ones(n), y[start:-1]]
    for j in range(1, k + 1):
        cols.append(dy[start - j:dy.size - j])
    return np.column_stack(cols), dy[start:]


def default_adf_max_lag(nobs: int) -> int:
    return int(math.floor(12 * (nobs / 100) ** 0.25))


def adf_test(series, max_lag: int | None = None) -> StationarityResult:
    """Augmented Dickey-Fuller test with constant, augmentation lags chosen by AIC.

    Candidate lag orders ``0..max_lag`` are compared on the common sample that
    the largest order allows; the chosen order is then refit on its maximal
    sample. Default ``max_lag`` is ``floor(12 * (T/100)**0.25)``.
    """
    y = _as_series(series)
    if np.ptp(y) == 0.0:
        raise ZeroVarianceError("ADF test undefined for a constant series")
    if max_lag is None:
        max_lag = default_adf_max_lag(y.size)
        while max_lag > 0 and y.size - 1 - max_lag < max_lag + 4:
            max_lag -= 1
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    n_common = y.size - 1 - max_lag
    if n_common < max_lag + 2 + 2:
        raise InsufficientDataError(f"T={y.size} too short for max_lag={max_lag}")

    best_k, best_aic = 0, math.inf
    for k in range(max_lag + 1):
        x, dy = _adf_design(y, k, max_lag)
        _, ssr, _ = _ols(x, dy)
        if ssr <= 0.0:
            raise ZeroVarianceError("ADF regression has zero residual variance")
        aic = n_common * math.log(ssr / n_common) + 2 * (k + 2)
        if aic < best_aic:
            best_k, best_aic = k, aic

    x, dy = _adf_design(y, best_k, best_k)
    beta, ssr, xtx_inv = _ols(x, dy)
    dof = dy.size - x.shape[1]
    s2 = ssr / dof
    if s2 <= 0.0:
        raise ZeroVarianceError("ADF regression has zero residual variance")
    stat = float(beta[1] / math.sqrt(s2 * xtx_inv[1]))
    return StationarityResult(TestKind.ADF, stat, best_k,
                              critical_values(TestKind.ADF, y.size), y.size)


def default_kpss_lags(nobs: int) -> int:
    return int(math.floor(4 * (nobs / 100) ** 0.25))


def kpss_test(series) -> StationarityResult:
    """KPSS test of level stationarity with a Bartlett-kernel long-run variance."""
    y = _as_series(series)
    t = y.size
    lags = default_kpss_lags(t)
    e = y - y.mean()
    s = np.cumsum(e)
    lrv = float(e @ e) / t
    for j in range(1, lags + 1):
        lrv += 2.0 * (1.0 - j / (lags + 1)) * float(e[j:] @ e[:-j]) / t
    if not lrv > 0.0:
        raise ZeroVarianceError("KPSS long-run variance is zero")
    stat = float(s @ s) / (t * t * lrv)
    return StationarityResult(TestKind.KPSS, stat, lags, critical_values(TestKind.KPSS, t), t)


def integration_order(series, d_max: int = 2) -> IntegrationOrder:
    """Smallest d whose d-th difference passes both ADF and KPSS at 5%.

    If no order up to ``d_max`` passes, returns ``d_max`` with ``flagged=True``.
    """
    y = np.asarray(series, dtype=float)
    if d_max < 0:
        raise ValueError("d_max must be >= 0")
    if y.size < MIN_LENGTH + d_max:
        raise InsufficientDataError(f"need at least {MIN_LENGTH + d_max} observations")
    trace = []
    z = y
    for d in range(d_max + 1):
        if d:
            z = np.diff(z)
        adf, kpss = adf_test(z), kpss_test(z)
        trace.append((adf, kpss))
        if adf.stationary and kpss.stationary:
            return IntegrationOrder(d, trace)
    return IntegrationOrder(d_max, trace, flagged=True)


def write_stationarity_csv(orders: Mapping[str, IntegrationOrder], path: str | os.PathLike) -> None:
    """One ADF and one KPSS row per coin, from the tests on the undifferenced series."""
    rows = []
    for coin, order in orders.items():
        for res in order.trace[0]:
            rows.append((coin, res.test.value, res.statistic, res.lags_used,
                         res.decision_5pct.value, order.d))
    frame = pd.DataFrame(rows, columns=["coin", "test", "statistic", "lags", "decision_5pct", "d"])
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
