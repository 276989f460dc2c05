"""Fingertip segmentation toolkit.

Synthetic hand-image generation, paired image/mask augmentation, an
encoder/FPN segmentation model family with analytic complexity accounting,
Jaccard-loss training, and micro-averaged evaluation.
"""

from tipseg.errors import (
    ConfigurationError,
    DataValidationError,
    DegenerateInputError,
    MissingInputError,
    NumericalError,
    SpecMismatchError,
)

__all__ = [
    "ConfigurationError",
    "DataValidationError",
    "DegenerateInputError",
    "MissingInputError",
    "NumericalError",
    "SpecMismatchError",
]

__version__ = "0.1.0"
