"""Temporal-graph motion forecasting on vectorized driving scenes."""

__version__ = "0.1.0"
