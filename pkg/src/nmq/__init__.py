"""Simulation of continuously monitored non-Markovian quantum systems.

The principal system is embedded together with a finite auxiliary system in
a joint Markov model.  The package integrates the joint stochastic master
equation, its principal-block decomposition and the reduced memory-kernel
equations, and cross-checks the formulations against each other.
"""

from .kernels import BACKEND
from .model import (
    BlockState,
    ModelError,
    ModelParseError,
    ModelSpec,
    block,
    load_model,
    partial_trace_aux,
    reference_init,
    reference_model,
    validate_model,
)
from .sde import NoisePath, wiener_path

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BlockState",
    "ModelError",
    "ModelParseError",
    "ModelSpec",
    "NoisePath",
    "block",
    "load_model",
    "partial_trace_aux",
    "reference_init",
    "reference_model",
    "validate_model",
    "wiener_path",
]
