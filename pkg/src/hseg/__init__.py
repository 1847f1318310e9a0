"""Hierarchical U-Net ensembles for lung lesion segmentation on CT slices."""

from hseg.errors import (ConfigError, DimensionError, EnsembleError, FormatError, GeometryError,
                         HsegError, TrainingError, UndefinedCorrelationError, UndefinedDistanceError,
                         UndefinedRatioError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "EnsembleError", "FormatError", "GeometryError", "HsegError",
    "TrainingError", "UndefinedCorrelationError", "UndefinedDistanceError", "UndefinedRatioError",
    "UsageError", "__version__",
]
