"""Backend selection for the hot kernels.

The compiled extension is used when it imports; ``SKELGROW_PURE_PYTHON=1``
forces the numpy fallback. Inputs are coerced to C-contiguous float64 here so
both backends see identical arrays.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("SKELGROW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _kernels_py


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def get_backend(name=None):
    """Return the kernel module by name (``"cython"``/``"numpy"``), or the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def lbs_forward(x, w, R, t):
    return _impl.lbs_forward(_c(x), _c(w), _c(R), _c(t))


def lbs_backward(x, w, R, t, g):
    return _impl.lbs_backward(_c(x), _c(w), _c(R), _c(t), _c(g))


def motion_kernels(point_traj, joint_traj):
    return _impl.motion_kernels(_c(point_traj), _c(joint_traj))


def nearest_neighbors(a, b):
    return _impl.nearest_neighbors(_c(a), _c(b))
