"""Desk-scale knowledge-distillation lab.

Weighted soft-label distillation, regularization-sample analysis and a
log-loss bias/variance decomposition, on small MLPs trained with manual
backprop.
"""

from distill_lab.numkit import (
    InvalidShapeError,
    InvalidTemperatureError,
    SeededRng,
    log_softmax_t,
    matmul,
    softmax_t,
)

__version__ = "0.1.0"

__all__ = [
    "InvalidShapeError",
    "InvalidTemperatureError",
    "SeededRng",
    "log_softmax_t",
    "matmul",
    "softmax_t",
]
