"""Tensor-network large deviations of a monitored collision-model spin chain."""

from __future__ import annotations

from .collision import ModelParams
from .large_deviations import ScgfCurve, ScgfPoint, SolverSettings, compute_curve
from .mps import Mpo, Mps

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "Mpo",
    "Mps",
    "ScgfCurve",
    "ScgfPoint",
    "SolverSettings",
    "compute_curve",
    "__version__",
]
