"""Loading, validation and time alignment of OHLCV price data.

Two CSV layouts are supported:

* daily candles: ``coin,date,open,high,low,close,volume`` with ``YYYY-MM-DD`` dates
* minute closes: ``coin,timestamp,close`` with ``YYYY-MM-DDTHH:MM:SSZ`` timestamps

All timestamps are handled as ``numpy.datetime64[s]`` in UTC.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    AlignmentError,
    DataError,
    DuplicateTimestampError,
    ParseError,
    ValidationError,
)

DAILY_COLUMNS = ["coin", "date", "open", "high", "low", "close", "volume"]
MINUTE_COLUMNS = ["coin", "timestamp", "close"]
PRICE_FIELDS = ("open", "high", "low", "close", "volume", "ohlc")


class Resolution(str, enum.Enum):
    MINUTE = "minute"
    DAILY = "daily"


@dataclass(frozen=True)
class OhlcvRecord:
    coin: str
    timestamp: np.datetime64
    open: float
    high: float
    low: float
    close: float
    volume: float

    def __post_init__(self):
        prices = (self.open, self.high, self.low, self.close, self.volume)
        if any(not np.isfinite(v) or v < 0 for v in prices):
            raise ValidationError(
                f"{self.coin} {_day(self.timestamp)}: prices and volume must be finite and >= 0"
            )
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise ValidationError(
                f"{self.coin} {_day(self.timestamp)}: candle violates "
                f"low <= min(open, close) and high >= max(open, close)"
            )


def _day(ts) -> str:
    return str(np.datetime64(ts, "D"))


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PriceSeries:
    coin: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        vals = np.asarray(self.values, dtype=float)
        if ts.ndim != 1 or vals.shape != ts.shape:
            raise DataError(f"{self.coin}: timestamps and values must be 1-d of equal length")
        if ts.size < 1:
            raise DataError(f"{self.coin}: empty price series")
        if np.any(np.diff(ts) <= np.timedelta64(0, "s")):
            raise DataError(f"{self.coin}: timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", _readonly(ts.copy()))
        object.__setattr__(self, "values", _readonly(vals.copy()))

    def __len__(self) -> int:
        return self.values.size

    def scaled(self, factor: float) -> "PriceSeries":
        return PriceSeries(self.coin, self.timestamps, self.values * factor)


@dataclass(frozen=True)
class AlignedPanel:
    """Rectangular time-by-coin matrix; column ``j`` holds ``coins[j]``."""

    coins: tuple[str, ...]
    timestamps: np.ndarray
    matrix: np.ndarray
    resolution: Resolution = Resolution.DAILY

    def __post_init__(self):
        coins = tuple(self.coins)
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        mat = np.asarray(self.matrix, dtype=float)
        if len(coins) < 1 or len(set(coins)) != len(coins):
            raise DataError("panel needs at least one coin and unique coin names")
        if mat.shape != (ts.size, len(coins)):
            raise DataError(f"matrix shape {mat.shape} does not match {ts.size} x {len(coins)}")
        if ts.size < 1:
            raise DataError("panel needs at least 1 timestamp")
        if np.any(np.diff(ts) <= np.timedelta64(0, "s")):
            raise DataError("panel timestamps must be strictly increasing")
        if not np.all(np.isfinite(mat)):
            raise DataError("panel contains missing or non-finite cells")
        object.__setattr__(self, "coins", coins)
        object.__setattr__(self, "timestamps", _readonly(ts.copy()))
        object.__setattr__(self, "matrix", _readonly(mat.copy()))
        object.__setattr__(self, "resolution", Resolution(self.resolution))

    @property
    def n_steps(self) -> int:
        return self.timestamps.size

    def column(self, coin: str) -> np.ndarray:
        try:
            return self.matrix[:, self.coins.index(coin)]
        except ValueError:
            raise KeyError(f"coin {coin!r} not in panel {list(self.coins)}") from None

    def series(self, coin: str) -> PriceSeries:
        return PriceSeries(coin, self.timestamps, self.column(coin))

    def select(self, coins: Sequence[str]) -> "AlignedPanel":
        idx = [self.coins.index(c) for c in coins]
        return AlignedPanel(tuple(coins), self.timestamps, self.matrix[:, idx], self.resolution)

    def slice_rows(self, start: int, stop: int) -> "AlignedPanel":
        return AlignedPanel(
            self.coins, self.timestamps[start:stop], self.matrix[start:stop], self.resolution
        )

    def with_matrix(self, matrix: np.ndarray) -> "AlignedPanel":
        return AlignedPanel(self.coins, self.timestamps, matrix, self.resolution)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.matrix, columns=list(self.coins))
        frame.insert(0, "timestamp", format_timestamps(self.timestamps))
        return frame


def format_timestamps(ts: np.ndarray) -> list[str]:
    return [str(t) + "Z" for t in np.asarray(ts, dtype="datetime64[s]")]


def _read_csv(path: str | os.PathLike, columns: list[str]) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise ParseError(f"{path}: empty file", line=1) from exc
    header = [c.strip() for c in frame.columns]
    if header != columns:
        raise ParseError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}", 1)
    frame.columns = header
    return frame


def _numeric(frame: pd.DataFrame, col: str, path) -> np.ndarray:
    vals = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        row = int(bad[0])
        raise ParseError(f"{path}: column {col!r} has non-numeric value {frame[col].iat[row]!r}",
                         line=row + 2)
    return vals


def _parse_times(frame: pd.DataFrame, col: str, fmt: str, path) -> np.ndarray:
    parsed = pd.to_datetime(frame[col], format=fmt, utc=True, errors="coerce")
    bad = np.flatnonzero(parsed.isna().to_numpy())
    if bad.size:
        row = int(bad[0])
        raise ParseError(f"{path}: bad {col} {frame[col].iat[row]!r} (expected {fmt})",
                         line=row + 2)
    return parsed.dt.tz_localize(None).to_numpy().astype("datetime64[s]")


def _check_coin_names(frame: pd.DataFrame, path) -> np.ndarray:
    coins = frame["coin"].str.strip().to_numpy()
    empty = np.flatnonzero(coins == "")
    if empty.size:
        raise ParseError(f"{path}: empty coin identifier", line=int(empty[0]) + 2)
    return coins


def load_daily_ohlcv(path: str | os.PathLike,
                     exclude: Iterable[str] = ()) -> dict[str, list[OhlcvRecord]]:
    """Load a daily candle CSV, dropping coins listed in ``exclude``.

    Returns records grouped by coin (in order of first appearance), each group
    sorted by date. Raises ``ParseError`` with the offending line number for
    malformed rows and ``ValidationError`` naming coin and date for candles
    that break the OHLC ordering.
    """
    frame = _read_csv(path, DAILY_COLUMNS)
    coins = _check_coin_names(frame, path)
    dates = _parse_times(frame, "date", "%Y-%m-%d", path)
    fields = {c: _numeric(frame, c, path) for c in DAILY_COLUMNS[2:]}

    excluded = set(exclude)
    grouped: dict[str, list[OhlcvRecord]] = {}
    for i in range(len(frame)):
        coin = coins[i]
        if coin in excluded:
            continue
        grouped.setdefault(coin, []).append(OhlcvRecord(
            coin, dates[i], fields["open"][i], fields["high"][i], fields["low"][i],
            fields["close"][i], fields["volume"][i]))

    for coin, records in grouped.items():
        records.sort(key=lambda r: r.timestamp)
        for prev, cur in zip(records, records[1:]):
            if prev.timestamp == cur.timestamp:
                raise DuplicateTimestampError(f"{coin}: duplicate date {_day(cur.timestamp)}")
    return grouped


def ohlc_average(record: OhlcvRecord) -> float:
    return (record.open + record.high + record.low + record.close) / 4.0


def daily_series(records: Sequence[OhlcvRecord], field: str = "ohlc") -> PriceSeries:
    """Turn one coin's candles into a series of ``field`` (or the OHLC average)."""
    if field not in PRICE_FIELDS:
        raise ValueError(f"field must be one of {PRICE_FIELDS}, got {field!r}")
    if not records:
        raise DataError("no records")
    ts = np.array([r.timestamp for r in records], dtype="datetime64[s]")
    if field == "ohlc":
        vals = np.array([ohlc_average(r) for r in records])
    else:
        vals = np.array([getattr(r, field) for r in records], dtype=float)
    return PriceSeries(records[0].coin, ts, vals)


def load_minute_closes(path: str | os.PathLike) -> list[PriceSeries]:
    """Load per-minute closing prices, one series per coin in first-appearance order.

    Rows of a coin must already be in strictly increasing time order: a
    repeated ``(coin, timestamp)`` raises ``DuplicateTimestampError`` and any
    backwards step raises ``DataError``.
    """
    frame = _read_csv(path, MINUTE_COLUMNS)
    coins = _check_coin_names(frame, path)
    ts = _parse_times(frame, "timestamp", "%Y-%m-%dT%H:%M:%SZ", path)
    closes = _numeric(frame, "close", path)
    negative = np.flatnonzero(closes < 0)
    if negative.size:
        raise ValidationError(f"{path}: line {int(negative[0]) + 2}: negative close price")

    order = pd.unique(coins)
    out = []
    for coin in order:
        rows = np.flatnonzero(coins == coin)
        t = ts[rows]
        step = np.diff(t)
        dup = np.flatnonzero(step == np.timedelta64(0, "s"))
        if dup.size:
            line = int(rows[dup[0] + 1]) + 2
            raise DuplicateTimestampError(f"{path}: line {line}: duplicate {coin} timestamp {t[dup[0]]}")
        back = np.flatnonzero(step < np.timedelta64(0, "s"))
        if back.size:
            line = int(rows[back[0] + 1]) + 2
            raise DataError(f"{path}: line {line}: {coin} timestamps are not increasing")
        if rows.size < 2:
            raise DataError(f"{path}: {coin} has fewer than 2 rows")
        out.append(PriceSeries(coin, t, closes[rows]))
    return out


def resample_daily(series: PriceSeries) -> PriceSeries:
    """Average observations within each UTC calendar day; empty days are omitted."""
    if len(series.values) == 0:
        raise DataError(f"{series.coin}: empty series")
    days = series.timestamps.astype("datetime64[D]")
    uniq, start = np.unique(days, return_index=True)
    sums = np.add.reduceat(series.values, start)
    counts = np.diff(np.append(start, days.size))
    return PriceSeries(series.coin, uniq.astype("datetime64[s]"), sums / counts)


def align_panel(series: Sequence[PriceSeries],
                resolution: Resolution | str = Resolution.DAILY) -> AlignedPanel:
    """Intersect timestamps across ``series``; columns keep the input order."""
    if len(series) == 0:
        raise DataError("align_panel needs at least one series")
    short = [s.coin for s in series if len(s) < 2]
    if short:
        raise DataError(f"series shorter than 2 observations: {short}")
    common = series[0].timestamps
    for s in series[1:]:
        common = np.intersect1d(common, s.timestamps, assume_unique=True)
    if common.size < 2:
        spans = "; ".join(f"{s.coin}: {s.timestamps[0]} .. {s.timestamps[-1]}" for s in series)
        raise AlignmentError(
            f"timestamp intersection has {common.size} instants (need >= 2); spans: {spans}")
    cols = []
    for s in series:
        idx = np.searchsorted(s.timestamps, common)
        cols.append(s.values[idx])
    return AlignedPanel(tuple(s.coin for s in series), common, np.column_stack(cols), resolution)


def daily_panel(records: Mapping[str, Sequence[OhlcvRecord]], field: str = "ohlc",
                coins: Sequence[str] | None = None) -> AlignedPanel:
    coins = list(records) if coins is None else list(coins)
    return align_panel([daily_series(records[c], field) for c in coins], Resolution.DAILY)


def write_panel_csv(panel: AlignedPanel, path: str | os.PathLike) -> None:
    panel.to_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def read_panel_csv(path: str | os.PathLike,
                   resolution: Resolution | str = Resolution.DAILY) -> AlignedPanel:
    frame = pd.read_csv(path)
    if frame.columns[0] != "timestamp":
        raise ParseError(f"{path}: first column must be 'timestamp'", 1)
    ts = _parse_times(frame.astype({"timestamp": str}), "timestamp", "%Y-%m-%dT%H:%M:%SZ", path)
    return AlignedPanel(tuple(frame.columns[1:]), ts, frame.iloc[:, 1:].to_numpy(float), resolution)
