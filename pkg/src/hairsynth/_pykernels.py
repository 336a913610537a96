"""Pure-numpy reference versions of the compiled kernels in ``_core``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw):
    n, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,H,W,kh,kw
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * h * w)


def col2im(cols, n, c, hp, wp, kh, kw):
    h, w = hp - kh + 1, wp - kw + 1
    if cols.shape != (c * kh * kw, n * h * w):
        raise ValueError("patch matrix shape does not match geometry")
    patches = cols.reshape(c, kh, kw, n, h, w)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # ascending (i, j) keeps the accumulation order of the compiled loop
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + h, j:j + w] += patches[:, i, j].transpose(1, 0, 2, 3)
    return out
