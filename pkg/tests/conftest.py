import os
import sys

import numpy as np
import pytest

from cryptocorr.ingest import AlignedPanel, PriceSeries

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(REPO, "data")
CONFIGS = os.path.join(REPO, "configs")


def days(n: int, start: str = "2021-01-01") -> np.ndarray:
    return (np.datetime64(start) + np.arange(n)).astype("datetime64[s]")


def minutes(n: int, start: str = "2021-01-01T00:00:00") -> np.ndarray:
    return np.datetime64(start) + np.arange(n) * np.timedelta64(1, "m")


def series(coin: str, values, start: str = "2021-01-01") -> PriceSeries:
    values = np.asarray(values, dtype=float)
    return PriceSeries(coin, days(values.size, start), values)


def panel(**columns) -> AlignedPanel:
    coins = list(columns)
    mat = np.column_stack([np.asarray(columns[c], dtype=float) for c in coins])
    return AlignedPanel(tuple(coins), days(mat.shape[0]), mat)


@pytest.fixture
def write_csv(tmp_path):
    def _write(name: str, text: str) -> str:
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
