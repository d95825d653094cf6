"""Video classification from motion: flow descriptors, PCA channels,
a multi-channel 1D-CNN, and a chi-squared-kernel SVM."""

from .errors import ConvergenceError, DataFormatError, StageError

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DataFormatError",
    "StageError",
    "__version__",
]
