"""Hot kernels with a compiled fast path.

The Cython extension ``_ckernels`` is used when it has been built; otherwise,
or when ``L2D_PURE_PYTHON=1`` is set in the environment, the numpy versions
in ``_numpy`` are used.  ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from l2d._kernels import _numpy

try:
    if os.environ.get("L2D_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by L2D_PURE_PYTHON")
    from l2d._kernels import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _numpy
    BACKEND = "numpy"

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3


def relation_huber(t, s, mask):
    """See :func:`l2d._kernels._numpy.relation_huber`."""
    s = np.ascontiguousarray(s)
    t = np.ascontiguousarray(t, dtype=s.dtype)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return _impl.relation_huber(t, s, mask)


__all__ = ["BACKEND", "im2col3x3", "col2im3x3", "relation_huber"]
