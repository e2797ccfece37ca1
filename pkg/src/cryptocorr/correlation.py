"""Pearson cross-correlation of coin pairs under windowed aggregation."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, InsufficientDataError, UndefinedCorrelationError
from .ingest import AlignedPanel, PriceSeries, format_timestamps


class WindowKind(str, enum.Enum):
    SLIDING = "sliding"
    TUMBLING = "tumbling"


@dataclass(frozen=True)
class WindowSpec:
    kind: WindowKind
    width: int

    def __post_init__(self):
        object.__setattr__(self, "kind", WindowKind(self.kind))
        if int(self.width) != self.width or self.width < 1:
            raise ValueError(f"window width must be a positive integer, got {self.width}")

    @property
    def label(self) -> str:
        return f"{self.kind.value}{self.width}"


REGIMES: dict[str, WindowSpec | None] = {
    "daily": None,
    "sliding7": WindowSpec(WindowKind.SLIDING, 7),
    "sliding30": WindowSpec(WindowKind.SLIDING, 30),
    "tumbling7": WindowSpec(WindowKind.TUMBLING, 7),
    "tumbling30": WindowSpec(WindowKind.TUMBLING, 30),
}


def regime_spec(name: str) -> WindowSpec | None:
    """Parse ``daily``, ``sliding<w>`` or ``tumbling<w>``."""
    if name in REGIMES:
        return REGIMES[name]
    for kind in WindowKind:
        if name.startswith(kind.value) and name[len(kind.value):].isdigit():
            return WindowSpec(kind, int(name[len(kind.value):]))
    raise ValueError(f"unknown correlation regime {name!r}")


class Intensity(str, enum.Enum):
    WEAK = "weak"
    AVERAGE = "average"
    ABOVE_AVERAGE = "above_average"
    HIGH = "high"


@dataclass(frozen=True)
class CorrelationTrend:
    pair: tuple[str, str]
    timestamps: np.ndarray
    r_values: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"timestamp": format_timestamps(self.timestamps), "r": self.r_values})


@dataclass(frozen=True)
class CorrelogramEntry:
    altcoin: str
    maincoin: str
    r: float
    regime: str

    @property
    def defined(self) -> bool:
        return not math.isnan(self.r)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two 1-d vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InsufficientDataError("pearson needs at least 2 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance input")
    # product of square roots is symmetric in (x, y), unlike sqrt(sxx * syy) reordering
    r = float(dx @ dy) / (math.sqrt(sxx) * math.sqrt(syy))
    return min(1.0, max(-1.0, r))


def _aggregate_values(values: np.ndarray, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (window-end indices, window means)."""
    n = values.size
    w = spec.width
    if w > n:
        raise InsufficientDataError(f"window width {w} exceeds series length {n}")
    if spec.kind is WindowKind.SLIDING:
        ends = np.arange(w - 1, n)
        means = np.lib.stride_tricks.sliding_window_view(values, w).mean(axis=1)
        # exact block means at tumbling positions keep the subsequence property bitwise
        means[::w] = values[: (n // w) * w].reshape(-1, w).mean(axis=1)[: means[::w].size]
        return ends, means
    blocks = n // w
    ends = np.arange(blocks) * w + (w - 1)
    means = values[: blocks * w].reshape(blocks, w).mean(axis=1)
    return ends, means


def window_aggregate(series: PriceSeries, spec: WindowSpec) -> PriceSeries:
    """Trailing window means, labelled with the last timestamp of each window."""
    ends, means = _aggregate_values(np.asarray(series.values, dtype=float), spec)
    return PriceSeries(series.coin, series.timestamps[ends], means)


def _aggregate_panel(panel: AlignedPanel, spec: WindowSpec | None) -> np.ndarray:
    if spec is None:
        return np.asarray(panel.matrix)
    cols = [_aggregate_values(panel.matrix[:, j], spec)[1] for j in range(len(panel.coins))]
    return np.column_stack(cols)


def panel_correlations(panel: AlignedPanel, target: str, spec: WindowSpec | None = None,
                       regime: str | None = None) -> list[CorrelogramEntry]:
    """Pearson r of every non-target column against ``target``.

    Columns with zero variance (after aggregation) yield an entry with
    ``r = nan`` which ``summarize`` and the exporters treat as undefined.
    """
    if target not in panel.coins:
        raise KeyError(f"target {target!r} not in panel")
    if regime is None:
        regime = "daily" if spec is None else spec.label
    agg = _aggregate_panel(panel, spec)
    if agg.shape[0] < 2:
        raise InsufficientDataError(f"regime {regime} leaves fewer than 2 aggregated values")
    t = agg[:, panel.coins.index(target)]
    out = []
    for j, coin in enumerate(panel.coins):
        if coin == target:
            continue
        try:
            r = pearson(t, agg[:, j])
        except UndefinedCorrelationError:
            r = float("nan")
        out.append(CorrelogramEntry(coin, target, r, regime))
    return out


def per_variable_correlations(panels: dict[str, AlignedPanel], target: str,
                              spec: WindowSpec | None = None,
                              regime: str | None = None) -> list[CorrelogramEntry]:
    """Average r over several variable panels (e.g. open/high/low/close/volume).

    Variables where a coin's correlation is undefined are skipped; a coin with
    no defined variable gets ``nan``.
    """
    per_var = [panel_correlations(p, target, spec, regime) for p in panels.values()]
    out = []
    for entries in zip(*per_var):
        rs = [e.r for e in entries if e.defined]
        r = float(np.mean(rs)) if rs else float("nan")
        first = entries[0]
        out.append(CorrelogramEntry(first.altcoin, first.maincoin, r, first.regime))
    return out


def summarize(entries: Iterable[CorrelogramEntry]) -> dict[str, float]:
    rs = np.array([e.r for e in entries if e.defined])
    if rs.size == 0:
        return {"count": 0, "mean_r": float("nan"), "min_r": float("nan"), "max_r": float("nan")}
    return {"count": int(rs.size), "mean_r": float(rs.mean()),
            "min_r": float(rs.min()), "max_r": float(rs.max())}


def cumulative_trend(a: PriceSeries, b: PriceSeries) -> CorrelationTrend:
    """Expanding-window correlation, lagged by one step.

    Entry ``n`` is Pearson r over steps ``0..n-1``; entry 0 is 1 by
    convention, and prefixes where either side has zero variance repeat the
    previous entry.
    """
    x = np.asarray(a.values, dtype=float)
    y = np.asarray(b.values, dtype=float)
    if x.shape != y.shape or not np.array_equal(a.timestamps, b.timestamps):
        raise DataError("cumulative_trend needs two aligned series")
    if x.size < 3:
        raise InsufficientDataError("cumulative_trend needs at least 3 observations")
    # shifting by the first value makes constant prefixes exactly zero-variance
    dx = x - x[0]
    dy = y - y[0]
    n = np.arange(1, x.size + 1, dtype=float)
    sx, sy = np.cumsum(dx), np.cumsum(dy)
    sxx = np.cumsum(dx * dx) - sx * sx / n
    syy = np.cumsum(dy * dy) - sy * sy / n
    sxy = np.cumsum(dx * dy) - sx * sy / n
    r = np.empty(x.size)
    r[0] = 1.0
    last = 1.0
    for i in range(1, x.size):
        vx, vy = sxx[i - 1], syy[i - 1]
        if vx > 0.0 and vy > 0.0:
            last = min(1.0, max(-1.0, sxy[i - 1] / (math.sqrt(vx) * math.sqrt(vy))))
        r[i] = last
    return CorrelationTrend((a.coin, b.coin), np.array(a.timestamps), r)


_BANDS = ((0.75, Intensity.HIGH), (0.5, Intensity.ABOVE_AVERAGE), (0.25, Intensity.AVERAGE))


def intensity_class(r: float) -> Intensity:
    """Band |r| into weak/average/above_average/high; edges go to the upper band."""
    if not -1.0 <= r <= 1.0:
        raise ValueError(f"correlation must lie in [-1, 1], got {r}")
    mag = abs(r)
    for edge, cls in _BANDS:
        if mag >= edge:
            return cls
    return Intensity.WEAK


def write_correlogram_csv(entries: Sequence[CorrelogramEntry], path: str | os.PathLike) -> None:
    frame = pd.DataFrame([(e.altcoin, e.maincoin, e.regime, e.r) for e in entries],
                         columns=["altcoin", "maincoin", "regime", "r"])
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def write_trend_csv(trend: CorrelationTrend, path: str | os.PathLike) -> None:
    trend.to_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
