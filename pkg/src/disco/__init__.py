"""Desk-scale distilled contrastive learning.

Self-contained momentum-contrast pretraining, frozen-teacher embedding
distillation, linear/semi-supervised/transfer probes, and binning-based
information-plane analysis, built on a small numpy-backed autodiff engine.
"""

import os as _os

# Thread cap must land in the environment before numpy loads its BLAS.
_t = _os.environ.get("DISCO_THREADS")
if _t:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ[_var] = _t
del _os, _t

from .tensor import (  # noqa: E402
    NumericError,
    ShapeError,
    Tensor,
    get_precision,
    precision,
    rng_from_key,
    set_precision,
)

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "set_precision",
    "get_precision",
    "precision",
    "rng_from_key",
]

__version__ = "0.1.0"
