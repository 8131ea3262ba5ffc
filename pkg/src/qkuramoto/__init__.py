"""Quenched disordered Kuramoto oscillators: particles, mean-field limit, fluctuations."""

from qkuramoto.model import (
    DisorderLaw,
    FourierModel,
    InitialLaw,
    PointMeasure,
    SineModel,
    b_bracket,
    circle_distance,
    eval_b,
    eval_c,
    wrap,
)

__version__ = "0.1.0"

__all__ = [
    "DisorderLaw",
    "FourierModel",
    "InitialLaw",
    "PointMeasure",
    "SineModel",
    "b_bracket",
    "circle_distance",
    "eval_b",
    "eval_c",
    "wrap",
    "__version__",
]
