"""Sequence encoders built on a small numpy tape-based autodiff core.

The package provides a recurrent encoder with ordered chunk gating, a
self-attention encoder, and a cascaded hybrid of the two, plus the logical
entailment task used to probe length generalization.
"""

import os

# The matrices used here are small; BLAS threadpool fan-out costs more in
# scheduling than it returns. Must run before numpy first loads, and only
# fills values the caller has not set.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .errors import ConfigError, ContractError, DataError, NumericsError, ShapeError
from .tensor import (
    GradTape,
    Tensor,
    backward,
    constant,
    default_dtype,
    dtype_scope,
    no_grad,
    parameter,
    set_default_dtype,
    tape_scope,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericsError",
    "ShapeError",
    "GradTape",
    "Tensor",
    "backward",
    "constant",
    "default_dtype",
    "dtype_scope",
    "no_grad",
    "parameter",
    "set_default_dtype",
    "tape_scope",
    "__version__",
]
