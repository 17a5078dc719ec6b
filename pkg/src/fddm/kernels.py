"""Backend selection for the per-class kernels.

The compiled extension is preferred. Set ``FDDM_PURE_PYTHON=1`` to force the
numpy fallback (useful for debugging and for the benchmark).
"""

from __future__ import annotations

import os

if os.environ.get("FDDM_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _backend
else:
    try:
        from . import _kernels as _backend  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _backend

IMPLEMENTATION: str = _backend.IMPLEMENTATION

masked_mean = _backend.masked_mean
masked_mean_backward = _backend.masked_mean_backward
softmax_kl_rows = _backend.softmax_kl_rows
cosine_matrix = _backend.cosine_matrix
cosine_matrix_backward = _backend.cosine_matrix_backward

__all__ = [
    "IMPLEMENTATION",
    "masked_mean",
    "masked_mean_backward",
    "softmax_kl_rows",
    "cosine_matrix",
    "cosine_matrix_backward",
]
