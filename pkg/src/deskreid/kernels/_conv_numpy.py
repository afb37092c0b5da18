"""Vectorized convolution fallback built on stride-tricks windows.

Same contracts as the JIT backend: padded input in, cross-correlation out.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, kh, kw, stride):
    # [N, C, OH, OW, KH, KW] view over the padded input
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


# Overflow is allowed to pass through silently: diverging runs produce
# infinities that the graph layer detects and reports.
def conv2d_forward(xp, w, stride):
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(w, gy, stride, hp, wp):
    n, oc, oh, ow = gy.shape
    _, ic, kh, kw = w.shape
    with np.errstate(over="ignore", invalid="ignore"):
        # [N, OH, OW, IC, KH, KW] -> [N, IC, OH, OW, KH, KW]
        gwin = np.tensordot(gy, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, ic, hp, wp), gy.dtype)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += gwin[..., u, v]
    return gxp


def conv2d_backward_weight(xp, gy, stride, kh, kw):
    win = _windows(xp, kh, kw, stride)
    with np.errstate(over="ignore", invalid="ignore"):
        # sum over batch and output positions: [OC, IC, KH, KW]
        return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
