"""Simulate, store and analyse time-tagged biphoton detection records."""

__version__ = "0.1.0"

from .model import (AutoCorrelationLevels, ModelParams, find_extremum, g12_empirical,  # noqa: E402
                    g12_theory, r_model)
from .timetag import DetectorChannel, TagDataset, load, save  # noqa: E402

__all__ = [
    "__version__",
    "AutoCorrelationLevels",
    "DetectorChannel",
    "ModelParams",
    "TagDataset",
    "find_extremum",
    "g12_empirical",
    "g12_theory",
    "load",
    "r_model",
    "save",
]
