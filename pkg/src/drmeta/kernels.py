"""MLP kernel backend selection.

The compiled extension is picked when built; otherwise the pure-numpy twin.
Set ``DRMETA_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and by tests that compare the two implementations).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("DRMETA_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_cy as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

mlp_forward = _impl.mlp_forward
mlp_value_grad = _impl.mlp_value_grad
mlp_mse_hvp = _impl.mlp_mse_hvp
mlp_adapt_eval = _impl.mlp_adapt_eval
mlp_meta_grad = _impl.mlp_meta_grad
