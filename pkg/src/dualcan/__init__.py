"""Dual-directional domain adaptation with noise identification and correction."""

from . import cli, datagen, evaluation, model, nic, trainer
from .errors import (
    ConfigError,
    FormatError,
    NumericError,
    ParameterError,
    ShapeError,
    StateError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "cli",
    "datagen",
    "evaluation",
    "model",
    "nic",
    "trainer",
    "ConfigError",
    "FormatError",
    "NumericError",
    "ParameterError",
    "ShapeError",
    "StateError",
    "VersionError",
]
