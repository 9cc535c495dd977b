"""Patch-based video anomaly detection, trained from scratch on CPU.

A hybrid convolutional autoencoder reconstructs small spatio-temporal
cuboids while a classifier head predicts each cuboid's grid position;
anomalies surface as bad reconstructions and confused position estimates.
"""

from .errors import (ConfigError, DataError, EvaluationError, NumericError,
                     PatchVadError)

__all__ = [
    "PatchVadError",
    "ConfigError",
    "DataError",
    "EvaluationError",
    "NumericError",
]

__version__ = "0.1.0"
