"""State-space models for population dynamics.

Compartmental models are declared as JSON files with reaction-rate formulas,
then simulated (deterministic, diffusion, Poisson-with-stochastic-rates or
exact jump) and fitted (particle filter, extended Kalman filter, simplex,
iterated filtering, adaptive Metropolis on either likelihood backend) through
a library API and a set of pipeable command-line stages.
"""

from ssm.expr import Expr, ExprError, differentiate, parse as parse_expr
from ssm.model import ModelError, ModelSpec, load_model, parse_model

__version__ = "0.1.0"

__all__ = [
    "Expr",
    "ExprError",
    "differentiate",
    "parse_expr",
    "ModelError",
    "ModelSpec",
    "load_model",
    "parse_model",
    "__version__",
]
