"""Conditional Malliavin calculus for degenerate diffusions, by simulation."""

from .expr import ExprError, parse
from .models import MODEL_NAMES, Model, default_x0, make_model, right_factor
from .rng import BrownianDriver
from .sde import CameronMartinVector, PathBundle, TimeGrid, simulate

__version__ = "0.1.0"

__all__ = [
    "BrownianDriver", "CameronMartinVector", "ExprError", "MODEL_NAMES", "Model", "PathBundle",
    "TimeGrid", "default_x0", "make_model", "parse", "right_factor", "simulate",
]
