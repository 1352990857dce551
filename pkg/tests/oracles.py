"""Independent reference implementations used to check the fast paths.

Everything here is written as plainly as possible (nested loops, direct
index arithmetic) and never calls into the library's compute kernels.
"""

import numpy as np


def conv2d_loops(x, kernel, bias, pad):
    """Six-nested-loop cross-correlation with zero padding."""
    if isinstance(pad, tuple):
        ph, pw = pad
    else:
        ph = pw = pad
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    assert c == i
    ho = h + 2 * ph - kh + 1
    wo = w + 2 * pw - kw + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for bn in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ic in range(i):
                        for dy in range(kh):
                            for dx in range(kw):
                                sy = y + dy - ph
                                sx = xx + dx - pw
                                if 0 <= sy < h and 0 <= sx < w:
                                    acc += x[bn, ic, sy, sx] * kernel[oc, ic, dy, dx]
                    out[bn, oc, y, xx] = acc + bias[oc]
    return out


def linear_loops(x, weight, bias):
    """Explicit double-loop matrix-vector product."""
    d_out, d_in = weight.shape
    out = np.zeros(d_out, dtype=x.dtype)
    for r in range(d_out):
        acc = 0.0
        for cidx in range(d_in):
            acc += weight[r, cidx] * x[cidx]
        out[r] = acc + bias[r]
    return out


def pixel_shuffle_inverse(y, r):
    """Apply the inverse index map of pixel_shuffle."""
    n, c2, hr, wr = y.shape
    h, w = hr // r, wr // r
    x = np.zeros((n, c2 * r * r, h, w), dtype=y.dtype)
    for bn in range(n):
        for c in range(c2):
            for hh in range(h):
                for ww in range(w):
                    for i in range(r):
                        for j in range(r):
                            x[bn, c * r * r + i * r + j, hh, ww] = y[
                                bn, c, hh * r + i, ww * r + j
                            ]
    return x


def finite_difference(f, arrays, names, step=1e-3):
    """Central finite differences of scalar f(dict of float64 arrays).

    Returns {name: gradient array}. Arrays must be float64 for the stated
    1e-4 relative tolerance to be meaningful.
    """
    grads = {}
    for name in names:
        base = arrays[name]
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = f(arrays)
            flat[idx] = orig - step
            fm = f(arrays)
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


def rel_err(a, b):
    """Relative error: max absolute difference over the arrays' magnitude.

    Scale-relative rather than elementwise-relative: near a cancellation
    zero the elementwise ratio is unbounded for any float32 implementation
    (two summation orders of the same exact sum already differ), so
    tolerances are read against the tensors' scale.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)
