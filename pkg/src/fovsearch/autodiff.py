"""Reverse-mode automatic differentiation over numpy arrays.

A `Var` wraps an ndarray and records the operation that produced it; calling
`backward` on a scalar root accumulates gradients into every reachable `Var`.
Plain numpy arrays and Python numbers mix freely with `Var`s and are treated
as constants.  Convolutions are decomposed into per-offset GEMMs so the whole
engine stays on BLAS; dtype (float32 vs float64) follows the inputs.
"""

from __future__ import annotations

import numpy as np


class GraphConsumedError(RuntimeError):
    """Raised when a backward pass is requested twice on the same graph."""


class Var:
    __slots__ = ("data", "grad", "_parents", "_backward")

    # Let `ndarray <op> Var` fall through to the reflected Var operators
    # instead of numpy trying to broadcast over the Var object.
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> np.ndarray:
        return self.data

    def _accum(self, g, owned=False):
        """Add a gradient contribution.

        `owned` marks arrays freshly allocated by the caller, which may be
        stored by reference; everything else is copied since it may be a view
        or shared with a sibling branch.
        """
        if self.grad is None:
            if owned:
                self.grad = g.reshape(self.data.shape)
            else:
                self.grad = np.array(g, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Accumulate gradients of this (scalar) value into all ancestors."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        self.grad = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, _negate(other))

    def __rsub__(self, other):
        return add(_negate(self), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, c):
        return power(self, c)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


def _toposort(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return list(reversed(order))


def _negate(x):
    return mul(x, -1.0) if isinstance(x, Var) else -np.asarray(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (the reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _val(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    out = Var(av + bv, parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def backward(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g, bv.shape))

    out._backward = backward
    return out


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = Var(av * bv, parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def backward(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g * bv, av.shape), owned=True)
        if isinstance(b, Var):
            b._accum(_unbroadcast(g * av, bv.shape), owned=True)

    out._backward = backward
    return out


def div(a, b):
    av, bv = _val(a), _val(b)
    out = Var(av / bv, parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def backward(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g / bv, av.shape), owned=True)
        if isinstance(b, Var):
            b._accum(_unbroadcast(-g * av / (bv * bv), bv.shape), owned=True)

    out._backward = backward
    return out


def power(a: Var, c: float):
    out = Var(a.data ** c, parents=(a,))

    def backward(g):
        a._accum(g * c * a.data ** (c - 1), owned=True)

    out._backward = backward
    return out


def exp(a: Var):
    val = np.exp(a.data)
    out = Var(val, parents=(a,))
    out._backward = lambda g: a._accum(g * val, owned=True)
    return out


def log(a: Var):
    out = Var(np.log(a.data), parents=(a,))
    out._backward = lambda g: a._accum(g / a.data, owned=True)
    return out


def relu(a: Var):
    mask = a.data > 0
    out = Var(np.where(mask, a.data, 0), parents=(a,))
    out._backward = lambda g: a._accum(g * mask, owned=True)
    return out


def sigmoid(a: Var):
    val = 1.0 / (1.0 + np.exp(-a.data))
    out = Var(val, parents=(a,))
    out._backward = lambda g: a._accum(g * val * (1.0 - val), owned=True)
    return out


def softplus(a: Var):
    out = Var(np.logaddexp(a.data, 0.0), parents=(a,))
    out._backward = lambda g: a._accum(g / (1.0 + np.exp(-a.data)), owned=True)
    return out


def clip(a: Var, lo: float, hi: float):
    """Clamp values; gradient is passed through only where not clipped."""
    mask = (a.data > lo) & (a.data < hi)
    out = Var(np.clip(a.data, lo, hi), parents=(a,))
    out._backward = lambda g: a._accum(g * mask, owned=True)
    return out


# -- reductions and shape ops ------------------------------------------------

def vsum(a: Var, axis=None, keepdims=False):
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy(), owned=True)

    out._backward = backward
    return out


def vmean(a: Var, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Var, shape):
    out = Var(a.data.reshape(shape), parents=(a,))
    out._backward = lambda g: a._accum(g.reshape(a.data.shape))
    return out


def getitem(a: Var, idx):
    out = Var(a.data[idx], parents=(a,))

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    out._backward = backward
    return out


def concat(parts, axis=0):
    vals = [_val(p) for p in parts]
    out = Var(np.concatenate(vals, axis=axis),
              parents=tuple(p for p in parts if isinstance(p, Var)))
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Var):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    out._backward = backward
    return out


def gather(a: Var, index):
    """Select rows along axis 0; backward scatter-adds."""
    index = np.asarray(index)
    out = Var(a.data[index], parents=(a,))

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, index, g)

    out._backward = backward
    return out


def scatter(segments, size: int, base=None, dtype=None):
    """Assemble a flat vector from disjoint (index array, Var) segments.

    Positions not covered by any segment take `base` values (default zero).
    """
    if dtype is None:
        dtype = next((v.dtype for _, v in segments if isinstance(v, Var)),
                     np.float64)
    outv = (np.zeros(size, dtype=dtype) if base is None
            else np.asarray(base, dtype=dtype).copy())
    for index, v in segments:
        outv[np.asarray(index)] = _val(v)
    parents = tuple(v for _, v in segments if isinstance(v, Var))
    out = Var(outv, parents=parents)

    def backward(g):
        for index, v in segments:
            if isinstance(v, Var):
                v._accum(g[np.asarray(index)], owned=True)

    out._backward = backward
    return out


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = Var(av @ bv, parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def backward(g):
        if isinstance(a, Var):
            a._accum(g @ bv.T, owned=True)
        if isinstance(b, Var):
            b._accum(av.T @ g, owned=True)

    out._backward = backward
    return out


def layernorm_channels(x: Var, gain, bias, eps: float = 1e-5):
    """Layer normalization across axis 1 of an NCHW tensor, fused backward."""
    xv = x.data
    c = xv.shape[1]
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    gv, bv = _val(gain), _val(bias)
    outv = y * gv.reshape(1, c, 1, 1) + bv.reshape(1, c, 1, 1)
    out = Var(outv, parents=tuple(p for p in (x, gain, bias) if isinstance(p, Var)))

    def backward(g):
        if isinstance(gain, Var):
            gain._accum((g * y).sum(axis=(0, 2, 3)))
        if isinstance(bias, Var):
            bias._accum(g.sum(axis=(0, 2, 3)))
        gh = g * gv.reshape(1, c, 1, 1)
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * y).mean(axis=1, keepdims=True)
        x._accum((gh - m1 - y * m2) * inv, owned=True)

    out._backward = backward
    return out


def logsumexp(a: Var, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = Var(np.squeeze(m + np.log(s), axis=axis), parents=(a,))
    soft = e / s

    def backward(g):
        a._accum(np.expand_dims(g, axis) * soft, owned=True)

    out._backward = backward
    return out


# -- structured ops ----------------------------------------------------------

def conv2d(x: Var, w, b=None, stride=1, pad=0):
    """2D convolution, NCHW layout, square stride/padding.

    im2col + one GEMM per direction; the column matrix is cached for the
    weight gradient so the backward pass is two GEMMs plus a col2im scatter.
    """
    xv, wv = _val(x), _val(w)
    n, cin, h, w_in = xv.shape
    cout, cin2, kh, kw = wv.shape
    assert cin == cin2, f"channel mismatch {cin} vs {cin2}"
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w_in + 2 * pad - kw) // stride + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]               # (n, cin, ho, wo, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    col = col.reshape(n * ho * wo, cin * kh * kw)
    wmat = wv.reshape(cout, cin * kh * kw)

    outv = (col @ wmat.T).reshape(n, ho, wo, cout)
    outv = np.ascontiguousarray(np.moveaxis(outv, 3, 1))
    if b is not None:
        outv += _val(b).reshape(1, cout, 1, 1)
    parents = tuple(p for p in (x, w, b) if isinstance(p, Var))
    out = Var(outv, parents=parents)

    def backward(g):
        gn = np.ascontiguousarray(np.moveaxis(g, 1, 3)).reshape(n * ho * wo, cout)
        if isinstance(b, Var):
            b._accum(g.sum(axis=(0, 2, 3)))
        if isinstance(w, Var):
            w._accum((gn.T @ col).reshape(wv.shape), owned=True)
        if isinstance(x, Var):
            gcol = (gn @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        np.moveaxis(gcol[:, :, :, :, i, j], 3, 1)
            x._accum(gxp[:, :, pad:pad + h, pad:pad + w_in] if pad else gxp,
                     owned=not pad)

    out._backward = backward
    return out


def _im2col_nhwc(xv, kh, kw, stride, pad):
    from . import _kernels as K

    n, h, w_in, cin = xv.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w_in + 2 * pad - kw) // stride + 1
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xv
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n * ho * wo, cin), ho, wo
    if K.HAVE_NUMBA and xp.size >= 1 << 18:
        return K.im2col_gather(np.ascontiguousarray(xp), kh, kw, stride, ho, wo), ho, wo
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                  # (n, ho, wo, cin, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return col.reshape(n * ho * wo, kh * kw * cin), ho, wo


def conv2d_nhwc(x: Var, w, b=None, stride=1, pad=0):
    """2D convolution in NHWC layout (channels innermost).

    Weights keep the canonical (cout, cin, kh, kw) shape; internally they are
    viewed as a (kh*kw*cin, cout) matrix so both GEMMs run without layout
    transposes of the activations.  The input gradient runs as a stride-1
    correlation of the (dilated) output gradient with the flipped kernel, so
    it is one more im2col + GEMM instead of per-offset scatter passes.
    """
    xv, wv = _val(x), _val(w)
    n, h, w_in, cin = xv.shape
    cout, cin2, kh, kw = wv.shape
    assert cin == cin2, f"channel mismatch {cin} vs {cin2}"
    col, ho, wo = _im2col_nhwc(xv, kh, kw, stride, pad)
    wmat = np.ascontiguousarray(wv.transpose(2, 3, 1, 0)).reshape(kh * kw * cin, cout)

    outv = (col @ wmat).reshape(n, ho, wo, cout)
    if b is not None:
        outv += _val(b)
    parents = tuple(p for p in (x, w, b) if isinstance(p, Var))
    out = Var(outv, parents=parents)

    def backward(g):
        gn = g.reshape(n * ho * wo, cout)
        if isinstance(b, Var):
            b._accum(g.sum(axis=(0, 1, 2)))
        if isinstance(w, Var):
            gw = (col.T @ gn).reshape(kh, kw, cin, cout)
            w._accum(np.ascontiguousarray(gw.transpose(3, 2, 0, 1)), owned=True)
        if isinstance(x, Var):
            if kh == kw == 1 and stride == 1:
                x._accum((gn @ wmat.T).reshape(xv.shape), owned=True)
                return
            # Scatter the output gradient into a dilated buffer that already
            # carries the transposed conv's padding, then correlate with the
            # flipped kernel at stride one.
            gd = np.zeros((n, h + kh - 1, w_in + kw - 1, cout), dtype=g.dtype)
            oy = slice(kh - 1 - pad, kh - 1 - pad + stride * ho, stride)
            ox = slice(kw - 1 - pad, kw - 1 - pad + stride * wo, stride)
            gd[:, oy, ox, :] = g.reshape(n, ho, wo, cout)
            wback = np.ascontiguousarray(
                wv[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(kh * kw * cout, cin)
            colg, gh, gw_ = _im2col_nhwc(gd, kh, kw, 1, 0)
            assert (gh, gw_) == (h, w_in)
            x._accum((colg @ wback).reshape(xv.shape), owned=True)

    out._backward = backward
    return out


def layernorm_last(x: Var, gain, bias, eps: float = 1e-5):
    """Layer normalization across the innermost axis, fused backward."""
    from . import _kernels as K

    xv = x.data
    gv, bv = _val(gain), _val(bias)
    c = xv.shape[-1]
    use_numba = K.HAVE_NUMBA and xv.size >= 1 << 18
    if use_numba:
        y2, inv_rows = K.ln_forward(np.ascontiguousarray(xv.reshape(-1, c)), eps)
        y = y2.reshape(xv.shape)
        inv = None
    else:
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
    out = Var(y * gv + bv, parents=tuple(p for p in (x, gain, bias)
                                         if isinstance(p, Var)))

    def backward(g):
        if isinstance(gain, Var):
            gain._accum((g * y).reshape(-1, c).sum(axis=0))
        if isinstance(bias, Var):
            bias._accum(g.reshape(-1, c).sum(axis=0))
        if not isinstance(x, Var):
            return
        if use_numba:
            dx = K.ln_backward(np.ascontiguousarray(g.reshape(-1, c)),
                               y.reshape(-1, c), inv_rows,
                               np.asarray(gv, dtype=xv.dtype).reshape(-1))
            x._accum(dx.reshape(xv.shape), owned=True)
        else:
            gh = g * gv
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * y).mean(axis=-1, keepdims=True)
            x._accum((gh - m1 - y * m2) * inv, owned=True)

    out._backward = backward
    return out


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Interpolation matrix for 1D bilinear resize (align-corners-false)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        t = src - i0
        i1 = min(i0 + 1, n_in - 1)
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize of a (..., H, W) array."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr
    ry = _bilinear_matrix(out_h, h, arr.dtype)
    rx = _bilinear_matrix(out_w, w, arr.dtype)
    x2 = arr.reshape(-1, h, w)
    tmp = np.tensordot(x2, ry, axes=([1], [1]))
    out = np.tensordot(tmp, rx, axes=([1], [1]))
    return out.reshape(*arr.shape[:-2], out_h, out_w)


def upsample_bilinear(x: Var, out_h: int, out_w: int):
    """Bilinear resize of a (..., H, W) tensor; exact adjoint in backward."""
    xv = _val(x)
    h, w = xv.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x if isinstance(x, Var) else Var(xv)
    ry = _bilinear_matrix(out_h, h, xv.dtype)
    rx = _bilinear_matrix(out_w, w, xv.dtype)
    lead = xv.shape[:-2]
    x2 = xv.reshape(-1, h, w)
    tmp = np.tensordot(x2, ry, axes=([1], [1]))       # (B, w, out_h)
    outv = np.tensordot(tmp, rx, axes=([1], [1]))     # (B, out_h, out_w)
    outv = outv.reshape(*lead, out_h, out_w)
    out = Var(outv, parents=(x,) if isinstance(x, Var) else ())

    def backward(g):
        g2 = g.reshape(-1, out_h, out_w)
        t = np.tensordot(g2, ry, axes=([1], [0]))     # (B, out_w, h)
        gx = np.tensordot(t, rx, axes=([1], [0]))     # (B, h, w)
        x._accum(gx.reshape(xv.shape), owned=True)

    out._backward = backward
    return out


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype else np.asarray(x)
    return Var(arr)
