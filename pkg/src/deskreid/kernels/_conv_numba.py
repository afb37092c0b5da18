"""JIT-compiled convolution kernels: explicit patch gather/scatter loops.

The convolutions are computed as one matrix product per call over patch
matrices; these kernels build and unbuild the patch matrices.  fastmath
stays off and the loops are single-threaded, so the memory traversal and
summation orders are fixed and repeated calls are bitwise-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride):
    """Patch matrix [N*OH*OW, IC*KH*KW] from a padded input [N, IC, HP, WP]."""
    n, ic, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((n * oh * ow, ic * kh * kw), xp.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                k = 0
                for c in range(ic):
                    for u in range(kh):
                        i0 = i * stride + u
                        j0 = j * stride
                        for v in range(kw):
                            cols[row, k] = xp[b, c, i0, j0 + v]
                            k += 1
    return cols


@njit(cache=True)
def col2im(gcols, n, ic, hp, wp, kh, kw, stride):
    """Scatter-add a patch-matrix gradient back onto the padded input."""
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    gxp = np.zeros((n, ic, hp, wp), gcols.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                k = 0
                for c in range(ic):
                    for u in range(kh):
                        i0 = i * stride + u
                        j0 = j * stride
                        for v in range(kw):
                            gxp[b, c, i0, j0 + v] += gcols[row, k]
                            k += 1
    return gxp


# Overflow in the products is legitimate here: a diverging run produces
# infinities that the graph layer detects and reports.
def conv2d_forward(xp, w, stride):
    n, ic, hp, wp = xp.shape
    oc, _, kh, kw = w.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = im2col(xp, kh, kw, stride)
    with np.errstate(over="ignore", invalid="ignore"):
        out = cols @ w.reshape(oc, ic * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))


def conv2d_backward_input(w, gy, stride, hp, wp):
    n, oc, oh, ow = gy.shape
    _, ic, kh, kw = w.shape
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
    with np.errstate(over="ignore", invalid="ignore"):
        gcols = gy_mat @ w.reshape(oc, ic * kh * kw)
    return col2im(gcols, n, ic, hp, wp, kh, kw, stride)


def conv2d_backward_weight(xp, gy, stride, kh, kw):
    n, ic, hp, wp = xp.shape
    oc, oh, ow = gy.shape[1], gy.shape[2], gy.shape[3]
    cols = im2col(xp, kh, kw, stride)
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
    with np.errstate(over="ignore", invalid="ignore"):
        gw = gy_mat.T @ cols
    return np.ascontiguousarray(gw.reshape(oc, ic, kh, kw))
