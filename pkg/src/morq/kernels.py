"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``MORQ_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from morq import _kernels_py

if os.environ.get("MORQ_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from morq import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
round_float = _impl.round_float
block_stats = _impl.block_stats
fake_quant_grid = _impl.fake_quant_grid
gemm_f32 = _impl.gemm_f32


def backends() -> dict:
    """All importable backends by name, for cross-checks and benchmarks."""
    found = {"python": _kernels_py}
    try:
        from morq import _kernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found
