import numpy as np

from . import kernels
from .kernels import HAVE_NUMBA
from .tape import (
    ContractError,
    DimensionError,
    Node,
    NumericError,
    ParameterError,
    Tape,
    as_matrix,
)


def matmul(a, b):
    """Plain (untaped) product with the tape's shape check."""
    t = Tape(record=False)
    return t.matmul(t.constant(a), t.constant(b)).value


def softmax(x, temperature: float = 1.0):
    """Softmax of a vector (or each row of a matrix) at ``temperature``."""
    t = Tape(record=False)
    out = t.softmax(t.constant(as_matrix(x)), temperature).value
    return out[0] if np.ndim(x) <= 1 else out


__all__ = [
    "HAVE_NUMBA",
    "ContractError",
    "DimensionError",
    "Node",
    "NumericError",
    "ParameterError",
    "Tape",
    "as_matrix",
    "kernels",
    "matmul",
    "softmax",
]
