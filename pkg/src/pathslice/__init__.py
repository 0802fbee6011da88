"""pathslice: a desk-scale laboratory for short-time propagator surgery.

Builds oscillatory-kernel approximations of the quantum propagator from
classical boundary-value data, composes them over subdivisions of a time
interval, and measures operator-norm convergence against a high-accuracy
split-step reference.
"""
from .errors import (
    ConfigError,
    DeterminantDegenerate,
    PathsliceError,
    RichardsonFailed,
    TimeStepTooLarge,
    TrajectoryEscaped,
    UndersampledPhase,
    WrapAround,
)
from .potentials import CATALOG, Potential, make_potential

__version__ = "0.1.0"

__all__ = [
    "CATALOG",
    "ConfigError",
    "DeterminantDegenerate",
    "PathsliceError",
    "Potential",
    "RichardsonFailed",
    "TimeStepTooLarge",
    "TrajectoryEscaped",
    "UndersampledPhase",
    "WrapAround",
    "make_potential",
    "__version__",
]
