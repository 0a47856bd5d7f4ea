"""Kernel backend selection.

The compiled extension is used when importable; set ``TTEKIT_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("TTEKIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

piece_exposure = _impl.piece_exposure
piece_index = _impl.piece_index
pe_loss_grad = _impl.pe_loss_grad
concordance_counts = _impl.concordance_counts
cox_breslow = _impl.cox_breslow


def backends():
    """All importable backends by name, for cross-checking and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
