"""Kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``OFFLINE_VCG_PURE=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("OFFLINE_VCG_PURE", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _native as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "native" if _impl is not _kernels_py else "python"

pgd_box_qp = _impl.pgd_box_qp
qp_objective = _impl.qp_objective
qp_gradient = _impl.qp_gradient
batch_optimal = _impl.batch_optimal
batch_policy_value = _impl.batch_policy_value

__all__ = [
    "BACKEND",
    "pgd_box_qp",
    "qp_objective",
    "qp_gradient",
    "batch_optimal",
    "batch_policy_value",
]
