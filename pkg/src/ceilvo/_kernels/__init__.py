"""Image-sampling kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``CEILVO_PURE_PYTHON=1``
to force the fallback.  ``BACKEND`` names the implementation in use.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("CEILVO_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear(img, u, v):
    """Sample ``img`` at sub-pixel coordinates.

    Returns ``(value, d_value/du, d_value/dv, in_bounds)``.  The partials are
    those of the bilinear interpolant itself, so they are exact derivatives
    of the returned values away from cell boundaries.
    """
    u = _f64(u)
    shape = u.shape
    val, du, dv, ok = _impl.bilinear(_f64(img), u.ravel(), _f64(v).ravel())
    return val.reshape(shape), du.reshape(shape), dv.reshape(shape), ok.reshape(shape)


def downsample2(img):
    """2x2 box average; odd trailing rows/columns are dropped."""
    return _impl.downsample2(_f64(img))


def central_gradient(img):
    """Central differences with edge replication at the border."""
    return _impl.central_gradient(_f64(img))


__all__ = ["BACKEND", "bilinear", "downsample2", "central_gradient"]
