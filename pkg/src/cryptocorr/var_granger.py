"""Bivariate VAR estimation and the Toda-Yamamoto Granger-causality test."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import DataError, InsufficientDataError, NumericalError, RankDeficiencyError
from .ingest import AlignedPanel, PriceSeries
from .stationarity import integration_order

PIVOT_TOL = 1e-12
ALPHA = 0.05


@dataclass(frozen=True)
class VarModel:
    """OLS-estimated VAR(p).

    ``coefficients[i]`` is the coefficient vector of equation ``i`` in the
    regressor order ``[1, y1_{t-1}, .., yk_{t-1}, y1_{t-2}, .., yk_{t-p}]``.
    """

    coins: tuple[str, ...]
    p: int
    coefficients: np.ndarray
    residual_covariance: np.ndarray
    per_equation_coef_covariance: np.ndarray
    residuals: np.ndarray
    regressors: np.ndarray
    t_effective: int

    @property
    def k(self) -> int:
        return len(self.coins)

    def lag_coefficient_index(self, lag: int, variable: int) -> int:
        return 1 + (lag - 1) * self.k + variable


@dataclass(frozen=True)
class GrangerResult:
    cause: str
    effect: str
    p: int
    d: int
    wald_statistic: float
    p_value: float
    nobs: int = 0

    @property
    def dof(self) -> int:
        return self.p

    @property
    def reject_at_5pct(self) -> bool:
        return self.p_value <= ALPHA


def _var_design(data: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    t = data.shape[0]
    lags = [data[p - j:t - j] for j in range(1, p + 1)]
    x = np.column_stack([np.ones(t - p)] + lags)
    return x, data[p:]


def _panel_data(panel) -> tuple[tuple[str, ...], np.ndarray]:
    if isinstance(panel, AlignedPanel):
        return panel.coins, np.asarray(panel.matrix, dtype=float)
    data = np.asarray(panel, dtype=float)
    if data.ndim != 2:
        raise ValueError("expected a T x k matrix or an AlignedPanel")
    return tuple(f"y{i}" for i in range(data.shape[1])), data


def fit_var(panel: AlignedPanel | np.ndarray, p: int) -> VarModel:
    """Equation-by-equation OLS with intercept and ``p`` lags of every variable.

    Solved by column-pivoted QR of the regressor matrix; a pivot smaller than
    ``1e-12`` times the largest one is reported as rank deficiency.
    """
    coins, data = _panel_data(panel)
    if p < 1 or int(p) != p:
        raise ValueError(f"lag order must be a positive integer, got {p}")
    t, k = data.shape
    if t < k * p + 10:
        raise InsufficientDataError(f"T={t} too short for a VAR({p}) in {k} variables")
    x, y = _var_design(data, p)
    n, m = x.shape

    q, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[-1] < PIVOT_TOL * diag[0]:
        raise RankDeficiencyError(f"VAR({p}) regressor matrix is rank deficient")
    beta_piv = scipy.linalg.solve_triangular(r, q.T @ y)
    beta = np.empty_like(beta_piv)
    beta[piv] = beta_piv
    resid = y - x @ beta

    r_inv = scipy.linalg.solve_triangular(r, np.eye(m))
    xtx_inv_piv = r_inv @ r_inv.T
    xtx_inv = np.empty_like(xtx_inv_piv)
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_piv

    sigma = resid.T @ resid / n
    sigma = (sigma + sigma.T) / 2
    # coefficient covariance uses the degrees-of-freedom corrected residual variance
    s2 = np.diag(resid.T @ resid) / (n - m)
    coef_cov = np.stack([s2[i] * xtx_inv for i in range(k)])
    return VarModel(tuple(coins), int(p), beta.T.copy(), sigma, coef_cov, resid, x, n)


def var_aic(model: VarModel) -> float:
    sign, logdet = np.linalg.slogdet(model.residual_covariance)
    if sign <= 0:
        raise NumericalError("residual covariance determinant is not positive")
    k = model.k
    return float(logdet + 2.0 * (k * k * model.p + k) / model.t_effective)


def select_lag(panel: AlignedPanel | np.ndarray, p_max: int) -> int:
    """AIC-minimizing lag in ``1..p_max``, all candidates fit on the last ``T - p_max`` rows."""
    coins, data = _panel_data(panel)
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    best_p, best_aic = 1, math.inf
    for p in range(1, p_max + 1):
        aic = var_aic(fit_var(data[p_max - p:], p))
        if aic < best_aic:
            best_p, best_aic = p, aic
    return best_p


def _lower_series(a: float, x: float) -> float:
    """P(a, x) by its power series; converges fast for x < a + 1."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_fraction(a: float, x: float) -> float:
    """Q(a, x) by its continued fraction (modified Lentz); for x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_upper_gamma(a: float, x: float) -> float:
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _lower_series(a, x))
    return min(1.0, _upper_fraction(a, x))


def chi2_survival(x: float, dof: int) -> float:
    """P(chi2_dof >= x) = Q(dof/2, x/2)."""
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    if x < 0 or math.isnan(x):
        raise ValueError(f"chi-square statistic must be >= 0, got {x}")
    return regularized_upper_gamma(dof / 2.0, x / 2.0)


def wald_test(model: VarModel, cause: int, effect: int, p: int) -> float:
    """Wald statistic for zero coefficients on lags ``1..p`` of ``cause`` in ``effect``'s equation."""
    if not 1 <= p <= model.p:
        raise ValueError(f"cannot restrict {p} lags of a VAR({model.p})")
    idx = [model.lag_coefficient_index(j, cause) for j in range(1, p + 1)]
    rb = model.coefficients[effect][idx]
    rvr = model.per_equation_coef_covariance[effect][np.ix_(idx, idx)]
    try:
        chol = scipy.linalg.cho_factor(rvr)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("restricted coefficient covariance is singular") from exc
    w = float(rb @ scipy.linalg.cho_solve(chol, rb))
    return max(w, 0.0)


def toda_yamamoto(cause: PriceSeries | np.ndarray, effect: PriceSeries | np.ndarray,
                  p_max: int = 10, d_max: int = 2, d: int | None = None,
                  p: int | None = None) -> GrangerResult:
    """Test H0: ``cause`` does not Granger-cause ``effect``.

    ``d`` is the larger integration order of the two series (estimated when
    not given), ``p`` the AIC lag on levels (selected when not given). A
    VAR(p + d) is fitted on levels and only the first ``p`` lags of ``cause``
    are restricted; the statistic is chi-square with ``p`` degrees of freedom.
    """
    x = np.asarray(getattr(cause, "values", cause), dtype=float)
    y = np.asarray(getattr(effect, "values", effect), dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("cause and effect must be aligned 1-d series of equal length")
    if isinstance(cause, PriceSeries) and isinstance(effect, PriceSeries):
        if not np.array_equal(cause.timestamps, effect.timestamps):
            raise DataError("cause and effect timestamps differ; align them first")
    names = (getattr(cause, "coin", "cause"), getattr(effect, "coin", "effect"))
    if d is None:
        d = max(integration_order(x, d_max).d, integration_order(y, d_max).d)
    data = np.column_stack([y, x])
    if p is None:
        p = select_lag(data, p_max)
    model = fit_var(data, p + d)
    w = wald_test(model, cause=1, effect=0, p=p)
    return GrangerResult(names[0], names[1], p, d, w, chi2_survival(w, p), model.t_effective)


def _pair_task(args):
    cause, effect, p_max, d_max = args
    try:
        return toda_yamamoto(cause, effect, p_max, d_max)
    except (DataError, ArithmeticError, ValueError) as exc:
        return (cause.coin, effect.coin, f"{type(exc).__name__}: {exc}")


def granger_pairs(panel: AlignedPanel, pairs: Sequence[tuple[str, str]], p_max: int = 10,
                  d_max: int = 2, jobs: int = 1) -> list[GrangerResult | tuple[str, str, str]]:
    """Toda-Yamamoto test for each ``(cause, effect)`` pair, in input order.

    A pair that fails yields a ``(cause, effect, message)`` tuple instead of a
    result so the remaining pairs still run.
    """
    tasks = [(panel.series(c), panel.series(e), p_max, d_max) for c, e in pairs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_pair_task, tasks))
    return [_pair_task(t) for t in tasks]


GRANGER_COLUMNS = ["cause", "effect", "p", "d", "chi2", "dof", "p_value", "reject_5pct"]


def granger_rows(results: Sequence[GrangerResult | tuple[str, str, str]]) -> pd.DataFrame:
    """Table of results; ``(cause, effect, error message)`` tuples become flagged rows."""
    rows = []
    for res in results:
        if isinstance(res, GrangerResult):
            rows.append((res.cause, res.effect, res.p, res.d, res.wald_statistic, res.dof,
                         res.p_value, res.reject_at_5pct, ""))
        else:
            cause, effect, msg = res
            rows.append((cause, effect, None, None, None, None, None, None, msg))
    return pd.DataFrame(rows, columns=GRANGER_COLUMNS + ["error"])


def write_granger_csv(results, path: str | os.PathLike) -> None:
    frame = granger_rows(results)
    if not frame["error"].astype(bool).any():
        frame = frame.drop(columns="error")
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
