"""Backend selection for the convolution hot loops.

The compiled extension ``hairsynth._core`` is used when importable. Setting
``HAIRSYNTH_BACKEND=python`` forces the numpy fallback, which is also used
automatically when the extension was not built.
"""
import os

import numpy as np

from . import _pykernels

_forced = os.environ.get("HAIRSYNTH_BACKEND", "").lower()

_core = None
if _forced != "python":
    try:
        from . import _core
    except ImportError:  # extension not built
        _core = None

BACKEND = "compiled" if _core is not None else "python"


def im2col(xp, kh, kw, backend=None):
    xp = np.ascontiguousarray(xp)
    if _use_compiled(backend, xp.dtype):
        return _core.im2col(xp, kh, kw)
    return _pykernels.im2col(xp, kh, kw)


def col2im(cols, shape, kh, kw, backend=None):
    cols = np.ascontiguousarray(cols)
    n, c, hp, wp = shape
    if _use_compiled(backend, cols.dtype):
        return _core.col2im(cols, n, c, hp, wp, kh, kw)
    return _pykernels.col2im(cols, n, c, hp, wp, kh, kw)


def _use_compiled(backend, dtype):
    if backend == "python" or _core is None:
        if backend == "compiled" and _core is None:
            raise RuntimeError("compiled backend requested but hairsynth._core is not built")
        return False
    return dtype in (np.float32, np.float64)
