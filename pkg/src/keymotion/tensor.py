"""Reverse-mode autodiff on numpy arrays.

A `Tensor` wraps an ndarray together with the closure that propagates
gradients to its parents.  Calling `backward()` on a scalar (or any
tensor, with an explicit seed) walks the graph once in reverse
topological order.  Gradients are allocated lazily and accumulated with
`+=`, so shared subexpressions are handled correctly.

All operators needed by the motion-transfer pipeline live here:
convolution, pooling, nearest up/downsampling, softmax with
temperature, batch/instance normalization, bilinear grid sampling with
border clamping (differentiable in both the image and the grid), and
the usual elementwise/reduction glue.  Domain-specific fused ops
(heatmap moments, Gaussian rendering, flow composition) live next to
their modules and build `Tensor` nodes through the same constructor.

Dtype is inherited from the input arrays: float64 for gradient checks,
float32 for large training runs.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

# Normalization epsilon.  Deliberately small so that the normalized
# output has unit variance to within test tolerance even for
# low-variance channels; float64/float32 both keep sqrt(var + 1e-8)
# well-conditioned at the activation scales seen in practice.
NORM_EPS = 1e-8

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- graph bookkeeping -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_builder):
        """Create an op output node.

        `backward_builder` is a zero-argument callable returning the
        backward closure; it is only invoked when some parent actually
        requires a gradient and grad mode is on, so forward-only passes
        retain no references to intermediate buffers.
        """
        rg = _grad_enabled and any(p.requires_grad for p in parents)
        if rg:
            return Tensor(data, True, parents, backward_builder())
        return Tensor(data, False)

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        self._accum(np.asarray(grad))
        # Iterative post-order topological sort; graphs can be a few
        # thousand nodes deep, which would overflow Python recursion.
        topo, visited = [], set()
        stack = [(self, iter(self._parents))]
        visited.add(id(self))
        while stack:
            node, it = stack[-1]
            advanced = False
            for parent in it:
                if id(parent) not in visited and parent.requires_grad:
                    visited.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            if node._parents:
                # interior node: its gradient has been fully propagated,
                # so release it together with the closure (which pins
                # forward buffers).  Leaves (parameters, inputs) keep
                # theirs.  Graphs are single-shot: a second backward()
                # through the same interior nodes is not supported.
                node.grad = None
                node._parents = ()
                node._backward = None

    def zero_grad(self):
        self.grad = None

    # -- conveniences ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal op instead")
        return mul(self, 1.0 / c)

    def __neg__(self):
        return neg(self)

    def detach(self):
        return stop_gradient(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def build():
        def bw():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        return bw

    out = Tensor._result(out_data, (a, b), build)
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def build():
        def bw():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))
        return bw

    out = Tensor._result(out_data, (a, b), build)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):  # tensor * constant
        a = as_tensor(a)
        c = b
        out_data = a.data * c

        def build_s():
            def bw():
                a._accum(_unbroadcast(out.grad * c, a.data.shape))
            return bw

        out = Tensor._result(out_data, (a,), build_s)
        return out
    if not isinstance(a, Tensor):
        return mul(b, a)
    out_data = a.data * b.data

    def build():
        def bw():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        return bw

    out = Tensor._result(out_data, (a, b), build)
    return out


def neg(a):
    a = as_tensor(a)

    def build():
        def bw():
            a._accum(-out.grad)
        return bw

    out = Tensor._result(-a.data, (a,), build)
    return out


def relu(a):
    out_data = np.maximum(a.data, 0)

    def build():
        mask = a.data > 0

        def bw():
            a._accum(out.grad * mask)
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def leaky_relu(a, slope=0.2):
    out_data = np.where(a.data > 0, a.data, a.data * slope)

    def build():
        scale = np.where(a.data > 0, 1.0, slope)

        def bw():
            a._accum(out.grad * scale)
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def sigmoid(a):
    out_data = expit(a.data)

    def build():
        def bw():
            a._accum(out.grad * (out_data * (1.0 - out_data)))
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def absolute(a):
    out_data = np.abs(a.data)

    def build():
        sign = np.sign(a.data)

        def bw():
            a._accum(out.grad * sign)
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def square(a):
    out_data = a.data * a.data

    def build():
        def bw():
            a._accum(out.grad * (2.0 * a.data))
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def stop_gradient(a):
    """Constant view of `a`: gradients never flow past this node."""
    return Tensor(a.data)


# -- reductions / shape ----------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def build():
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def tmean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out_data.size

    def build():
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape) / n)
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def reshape(a, shape):
    old = a.data.shape

    def build():
        def bw():
            a._accum(out.grad.reshape(old))
        return bw

    out = Tensor._result(a.data.reshape(shape), (a,), build)
    return out


def moveaxis(a, src, dst):
    def build():
        def bw():
            a._accum(np.moveaxis(out.grad, dst, src))
        return bw

    out = Tensor._result(np.moveaxis(a.data, src, dst), (a,), build)
    return out


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def build():
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(g[tuple(idx)])
        return bw

    out = Tensor._result(out_data, tuple(tensors), build)
    return out


def repeat_batch(a, k):
    """Repeat each batch entry k times along axis 0: (N, ...) -> (N*k, ...)."""
    out_data = np.repeat(a.data, k, axis=0)

    def build():
        n = a.data.shape[0]

        def bw():
            g = out.grad
            a._accum(g.reshape((n, k) + g.shape[1:]).sum(axis=1))
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


def tile_hw(a, h, w):
    """Broadcast a (...,) tensor to (..., h, w); backward sums the plane."""
    out_data = np.broadcast_to(a.data[..., None, None], a.data.shape + (h, w)).copy()

    def build():
        def bw():
            a._accum(out.grad.sum(axis=(-2, -1)))
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


# -- losses ----------------------------------------------------------------


def l1_mean(a, b):
    """Mean absolute difference, a scalar."""
    return tmean(absolute(sub(a, b)))


def square_mean(a):
    """Mean of squares, a scalar."""
    return tmean(square(a))


# -- softmax ---------------------------------------------------------------


def softmax(a, axis, temperature=1.0):
    """Softmax over `axis` (an int or tuple) of a / temperature."""
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def build():
        def bw():
            g = out.grad
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * out_data / temperature)
        return bw

    out = Tensor._result(out_data, (a,), build)
    return out


# -- normalization ---------------------------------------------------------


def norm2d(x, gamma, beta, mode="auto", eps=NORM_EPS):
    """Normalize an (N, C, H, W) activation and apply a per-channel affine.

    mode  "batch":    statistics over (N, H, W)
          "instance": statistics over (H, W), per sample
          "auto":     batch when N >= 4, else instance (small-batch
                      inference falls back to per-sample statistics, so
                      no running averages need to be stored)
    Variance is the biased estimator; eps is added under the sqrt.
    """
    if mode == "auto":
        mode = "batch" if x.data.shape[0] >= 4 else "instance"
    if mode == "batch":
        axes = (0, 2, 3)
    elif mode == "instance":
        axes = (2, 3)
    else:
        raise ValueError(f"unknown norm mode {mode!r}")

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    gamma_b = gamma.data.reshape(1, -1, 1, 1)
    beta_b = beta.data.reshape(1, -1, 1, 1)
    out_data = gamma_b * xhat + beta_b

    def build():
        m = 1
        for ax in axes:
            m *= x.data.shape[ax]

        def bw():
            g = out.grad
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx_hat = g * gamma_b
                s1 = gx_hat.sum(axis=axes, keepdims=True)
                s2 = (gx_hat * xhat).sum(axis=axes, keepdims=True)
                x._accum(inv_std / m * (m * gx_hat - s1 - xhat * s2))
        return bw

    out = Tensor._result(out_data, (x, gamma, beta), build)
    return out


# -- convolution / pooling / resampling ------------------------------------


def _im2col(xd, kh, kw, stride, pad):
    """(N,Ci,H,W) -> contiguous (N*Ho*Wo, kh*kw*Ci) patch matrix.

    Works channels-last internally: one fused pad-and-transpose, then
    kh*kw contiguous slice copies.  Gathering through a transposed
    sliding-window view instead makes the reads hop a full image plane
    apart and runs several times slower.
    """
    n, ci, h, w = xd.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s = stride
    xt = np.zeros((n, hp, wp, ci), dtype=xd.dtype)
    xt[:, pad:pad + h, pad:pad + w, :] = xd.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, ci), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + s * ho:s, j:j + s * wo:s, :]
    return cols.reshape(n * ho * wo, kh * kw * ci), ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation: x (N,Ci,H,W), w (Co,Ci,kh,kw), b (Co,).

    Lowered to a single GEMM over im2col patches; the patch matrix is
    rebuilt (not retained) in the backward pass to keep graph memory
    proportional to the activations, not to kernel_size^2 times them.
    """
    n, ci, h, wd = x.data.shape
    co, ci2, kh, kw = w.data.shape
    if ci != ci2:
        raise ValueError(f"channel mismatch: input {ci}, kernel {ci2}")
    s, p = stride, padding
    cols, ho, wo = _im2col(x.data, kh, kw, s, p)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(co, -1)
    out_mat = cols @ w2.T  # (N*Ho*Wo, Co)
    out_data = np.ascontiguousarray(
        np.moveaxis(out_mat.reshape(n, ho, wo, co), 3, 1))
    if b is not None:
        out_data += b.data.reshape(1, -1, 1, 1)

    def build():
        def bw():
            g = out.grad
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
            g_mat = np.ascontiguousarray(
                g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
            if w.requires_grad:
                cols2, _, _ = _im2col(x.data, kh, kw, s, p)
                gw = (g_mat.T @ cols2).reshape(co, kh, kw, ci)
                w._accum(np.ascontiguousarray(gw.transpose(0, 3, 1, 2)))
            if x.requires_grad:
                u = (g_mat @ w2).reshape(n, ho, wo, kh, kw, ci)
                hp, wp = h + 2 * p, wd + 2 * p
                gx_pad = np.zeros((n, hp, wp, ci), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gx_pad[:, i:i + s * ho:s, j:j + s * wo:s, :] += u[:, :, :, i, j, :]
                gx = gx_pad[:, p:p + h, p:p + wd, :] if p else gx_pad
                x._accum(np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
        return bw

    out = Tensor._result(out_data, (x, w) + ((b,) if b is not None else ()), build)
    return out


def avg_pool2d(x, k=2):
    """Non-overlapping k*k average pooling (stride = k)."""
    n, c, h, w = x.data.shape
    assert h % k == 0 and w % k == 0, "avg_pool2d needs divisible spatial dims"
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def build():
        def bw():
            g = np.repeat(np.repeat(out.grad, k, axis=2), k, axis=3)
            x._accum(g / (k * k))
        return bw

    out = Tensor._result(out_data, (x,), build)
    return out


def upsample_nearest(x, factor=2):
    f = factor
    out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def build():
        n, c, h, w = x.data.shape

        def bw():
            g = out.grad.reshape(n, c, h, f, w, f).sum(axis=(3, 5))
            x._accum(g)
        return bw

    out = Tensor._result(out_data, (x,), build)
    return out


def downsample_nearest(x, factor=2):
    """Strided nearest-neighbour decimation (keeps the top-left sample
    of each factor*factor cell).  Used to bring a full-resolution flow
    field down to a coarser feature resolution."""
    f = factor
    if f == 1:
        return x
    out_data = np.ascontiguousarray(x.data[:, :, ::f, ::f])

    def build():
        def bw():
            g = np.zeros_like(x.data)
            g[:, :, ::f, ::f] = out.grad
            x._accum(g)
        return bw

    out = Tensor._result(out_data, (x,), build)
    return out


# -- coordinate lattice ----------------------------------------------------
#
# Pixels live on a normalized [-1, 1] lattice with half-pixel centers:
# column j of a width-W image sits at (2j + 1)/W - 1.  For power-of-two
# sizes these values (and their inverses) are exact binary fractions, so
# an identity warp reproduces its input bit for bit.


def lattice_1d(n, dtype=np.float64):
    return ((2.0 * np.arange(n) + 1.0) / n - 1.0).astype(dtype)


def pixel_grid(h, w, dtype=np.float64):
    """(h, w, 2) array of pixel-center coordinates; [..., 0] is x (width
    axis), [..., 1] is y (height axis)."""
    gx = lattice_1d(w, dtype)
    gy = lattice_1d(h, dtype)
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = gx[None, :]
    grid[..., 1] = gy[:, None]
    return grid


def pixel_pitch(n):
    """Distance between adjacent pixel centers in normalized coordinates."""
    return 2.0 / n


def to_pixel(coord, n):
    """Normalized coordinate -> fractional pixel index along an axis of size n."""
    return ((coord + 1.0) * n - 1.0) / 2.0


def from_pixel(idx, n):
    """Fractional pixel index -> normalized coordinate along an axis of size n."""
    return (2.0 * idx + 1.0) / n - 1.0


# -- bilinear sampling -----------------------------------------------------


def grid_sample_bilinear(x, grid):
    """Sample x (N,C,H,W) at `grid` (N,Ho,Wo,2) of normalized coords.

    Out-of-range coordinates clamp to the border pixel (replicate
    padding).  Differentiable in both x and grid; the spatial gradient
    vanishes smoothly in fully clamped regions because both interpolation
    corners collapse onto the border pixel.
    """
    gd = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if not isinstance(grid, Tensor):
        grid = Tensor(gd)
    n, c, h, w = x.data.shape
    fu = to_pixel(gd[..., 0], w)  # (N, Ho, Wo)
    fv = to_pixel(gd[..., 1], h)
    u0 = np.floor(fu)
    v0 = np.floor(fv)
    wu = fu - u0
    wv = fv - v0
    u0i = np.clip(u0, 0, w - 1).astype(np.intp)
    u1i = np.clip(u0 + 1, 0, w - 1).astype(np.intp)
    v0i = np.clip(v0, 0, h - 1).astype(np.intp)
    v1i = np.clip(v0 + 1, 0, h - 1).astype(np.intp)

    ni = np.arange(n)[:, None, None]
    # corner gathers: (N, Ho, Wo, C)
    x00 = x.data[ni, :, v0i, u0i]
    x01 = x.data[ni, :, v0i, u1i]
    x10 = x.data[ni, :, v1i, u0i]
    x11 = x.data[ni, :, v1i, u1i]
    wu_ = wu[..., None]
    wv_ = wv[..., None]
    top = x00 + (x01 - x00) * wu_
    bot = x10 + (x11 - x10) * wu_
    out_nhwc = top + (bot - top) * wv_
    out_data = np.ascontiguousarray(np.moveaxis(out_nhwc, 3, 1))

    def build():
        def bw():
            g = np.moveaxis(out.grad, 1, 3)  # (N, Ho, Wo, C)
            if x.requires_grad:
                w00 = ((1 - wu) * (1 - wv))[..., None]
                w01 = (wu * (1 - wv))[..., None]
                w10 = ((1 - wu) * wv)[..., None]
                w11 = (wu * wv)[..., None]
                ci = np.arange(c)
                base = ni[..., None] * (c * h * w) + ci * (h * w)
                idx = np.concatenate([
                    (base + (v0i[..., None] * w + u0i[..., None])).ravel(),
                    (base + (v0i[..., None] * w + u1i[..., None])).ravel(),
                    (base + (v1i[..., None] * w + u0i[..., None])).ravel(),
                    (base + (v1i[..., None] * w + u1i[..., None])).ravel(),
                ])
                vals = np.concatenate([
                    (g * w00).ravel(), (g * w01).ravel(),
                    (g * w10).ravel(), (g * w11).ravel(),
                ])
                gx = np.bincount(idx, weights=vals, minlength=n * c * h * w)
                x._accum(gx.reshape(n, c, h, w).astype(x.data.dtype, copy=False))
            if grid.requires_grad:
                du = ((x01 - x00) * (1 - wv_) + (x11 - x10) * wv_)
                dv = ((x10 - x00) * (1 - wu_) + (x11 - x01) * wu_)
                gu = (g * du).sum(axis=3) * (w / 2.0)
                gv = (g * dv).sum(axis=3) * (h / 2.0)
                grid._accum(np.stack([gu, gv], axis=-1))
        return bw

    out = Tensor._result(out_data, (x, grid), build)
    return out
