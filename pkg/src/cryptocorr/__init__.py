"""Correlation, causality and forecasting toolkit for cryptocurrency price series."""

__version__ = "0.1.0"
