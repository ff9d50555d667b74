"""Optional numba-fused kernels for the bandwidth-bound inner loops.

Everything here has a pure-numpy twin in `autodiff`/`model`; these exist only
because channel-last layer norm and the five-level blend are memory-bound and
benefit from single-pass fusion.  Import failure falls back to numpy.
"""

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f
        return wrap if not (len(a) == 1 and callable(a[0])) else a[0]

    prange = range


@njit(parallel=True, cache=True)
def ln_forward(x2, eps):
    """Rows normalized to zero mean / unit variance; returns (y, inv)."""
    r, c = x2.shape
    y = np.empty_like(x2)
    inv = np.empty(r, dtype=x2.dtype)
    for i in prange(r):
        m = 0.0
        for j in range(c):
            m += x2[i, j]
        m /= c
        v = 0.0
        for j in range(c):
            d = x2[i, j] - m
            v += d * d
        v /= c
        s = 1.0 / np.sqrt(v + eps)
        inv[i] = s
        for j in range(c):
            y[i, j] = (x2[i, j] - m) * s
    return y, inv


@njit(parallel=True, cache=True)
def ln_backward(g2, y2, inv, gain):
    """Input gradient of channel-last layer norm."""
    r, c = g2.shape
    dx = np.empty_like(g2)
    for i in prange(r):
        s1 = 0.0
        s2 = 0.0
        for j in range(c):
            gh = g2[i, j] * gain[j]
            s1 += gh
            s2 += gh * y2[i, j]
        s1 /= c
        s2 /= c
        for j in range(c):
            gh = g2[i, j] * gain[j]
            dx[i, j] = (gh - s1 - y2[i, j] * s2) * inv[i]
    return dx


@njit(parallel=True, cache=True)
def im2col_gather(xp, kh, kw, stride, ho, wo):
    """Window gather for NHWC im2col: (n*ho*wo, kh*kw*c)."""
    n, hp, wp, c = xp.shape
    col = np.empty((n * ho * wo, kh * kw * c), dtype=xp.dtype)
    for r in prange(n * ho):
        nn = r // ho
        yy = (r % ho) * stride
        base = r * wo
        for xx in range(wo):
            row = base + xx
            x0 = xx * stride
            k = 0
            for i in range(kh):
                for j in range(kw):
                    src = xp[nn, yy + i, x0 + j]
                    for cc in range(c):
                        col[row, k] = src[cc]
                        k += 1
    return col


@njit(parallel=True, cache=True)
def blend_forward(levels, weights):
    """out[n,p,c] = sum_i levels[i,p,c] * weights[i,n,p]."""
    k, p, c = levels.shape
    n = weights.shape[1]
    out = np.empty((n, p, c), dtype=levels.dtype)
    for pp in prange(p):
        for nn in range(n):
            for cc in range(c):
                acc = 0.0
                for i in range(k):
                    acc += levels[i, pp, cc] * weights[i, nn, pp]
                out[nn, pp, cc] = acc
    return out


@njit(parallel=True, cache=True)
def blend_backward(g, levels, weights, need_level, need_weight):
    """Gradients for blend_forward; masks choose which outputs to fill."""
    k, p, c = levels.shape
    n = weights.shape[1]
    dlev = np.zeros((k, p, c), dtype=levels.dtype)
    dwei = np.zeros((k, n, p), dtype=levels.dtype)
    for pp in prange(p):
        for nn in range(n):
            for i in range(k):
                if need_weight[i]:
                    acc = 0.0
                    for cc in range(c):
                        acc += g[nn, pp, cc] * levels[i, pp, cc]
                    dwei[i, nn, pp] = acc
            for cc in range(c):
                gv = g[nn, pp, cc]
                for i in range(k):
                    if need_level[i]:
                        dlev[i, pp, cc] += gv * weights[i, nn, pp]
    return dlev, dwei
