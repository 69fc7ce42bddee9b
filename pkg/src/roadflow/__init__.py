"""Spatio-temporal forecasting on directed road-link networks.

Builds distance / direction / positional multi-graphs from link geometry,
trains multi-graph convolutional forecasting networks on traffic speed
series, and ships the training / evaluation / study harnesses around them.
"""

from roadflow.errors import ConfigError, DataError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "ShapeError", "__version__"]
