"""Minimal reverse-mode automatic differentiation over NumPy arrays.

The engine is deliberately small: a :class:`Tensor` wraps an ``ndarray``,
operations record a backward closure, and :func:`backward` walks the tape in
reverse topological order.  Only the operations needed by the segmentation
model are provided, each with a hand-derived vector-Jacobian product that is
validated against finite differences in the test suite.

Gradients flow only through tensors with ``requires_grad=True``; subgraphs
whose inputs are all constant (e.g. a frozen backbone) build no tape at all,
so running them costs the same as plain NumPy.
"""

from __future__ import annotations

import functools
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class BufferPool:
    """Reusable output buffers for the large matrix products.

    Writing GEMM results into freshly malloc'ed pages is several times slower
    than into long-lived ones (TLB / page-fault effects), so inner loops that
    repeat the same computation graph can opt into buffer reuse.  Callers must
    invoke :meth:`reset` once per iteration and must not hold references to
    op outputs across resets.  Disabled by default; plain allocation applies.
    """

    def __init__(self):
        self.enabled = False
        self._buffers = {}
        self._cursor = {}

    def reset(self):
        self._cursor.clear()

    def clear(self):
        self._buffers.clear()
        self._cursor.clear()

    def get(self, shape, dtype):
        if not self.enabled:
            return np.empty(shape, dtype)
        key = (shape, np.dtype(dtype).str)
        i = self._cursor.get(key, 0)
        self._cursor[key] = i + 1
        stack = self._buffers.setdefault(key, [])
        if i == len(stack):
            stack.append(np.empty(shape, dtype))
        return stack[i]


pool = BufferPool()


@contextmanager
def pooled_buffers():
    """Enable GEMM output-buffer reuse inside the block (see BufferPool)."""
    prev = pool.enabled
    pool.enabled = True
    try:
        yield pool
    finally:
        pool.enabled = prev


def _mm(a, b):
    """np.matmul routed through the buffer pool when enabled."""
    if not pool.enabled or a.dtype != b.dtype or a.ndim < 2 or b.ndim < 2:
        return np.matmul(a, b)
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        return np.matmul(a, b)
    shape = lead + (a.shape[-2], b.shape[-1])
    return np.matmul(a, b, out=pool.get(shape, a.dtype))


class Tensor:
    """An ndarray plus an optional place on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None

    # -- convenience -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g, fresh=False):
        """Add ``g`` to the gradient buffer.

        ``fresh=True`` promises the caller holds the only reference to ``g``
        (a newly allocated array), letting the first accumulation adopt it
        without a copy.
        """
        if self.grad is None:
            if fresh:
                self.grad = g
            else:
                self.grad = np.array(g)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    """Create a result tensor, attaching it to the tape when required."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(root: Tensor, grad=None):
    """Backpropagate from ``root`` through the recorded tape.

    ``root`` is typically a scalar loss; for non-scalar roots an explicit
    ``grad`` of matching shape must be supplied.
    """
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that is not on the tape")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("grad must be supplied for non-scalar outputs")
        grad = np.ones_like(root.data)

    # Iterative topological order (avoids recursion limits on deep models).
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    root.accumulate_grad(grad)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # Free intermediate grads/tape eagerly; leaves keep their gradient.
        if node._backward is not None:
            node.grad = None
            node._backward = None
            node._parents = ()


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def _is_scalar(x):
    # Python scalars stay "weak" in NumPy promotion, preserving float32.
    return isinstance(x, (int, float))


def add(a, b):
    if _is_scalar(b) or _is_scalar(a):
        t, s = (a, b) if _is_scalar(b) else (b, a)
        t = as_tensor(t)

        def bwd_s(g):
            t.accumulate_grad(g)

        return _make(t.data + s, (t,), bwd_s)

    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        t = as_tensor(b)

        def bwd_s(g):
            t.accumulate_grad(-g, fresh=True)

        return _make(a - t.data, (t,), bwd_s)

    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    if _is_scalar(b) or _is_scalar(a):
        t, s = (a, b) if _is_scalar(b) else (b, a)
        t = as_tensor(t)

        def bwd_s(g):
            t.accumulate_grad(g * s, fresh=True)

        return _make(t.data * s, (t,), bwd_s)

    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), fresh=True)

    return _make(data, (a, b), bwd)


def div(a, b):
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    if _is_scalar(a):
        t = as_tensor(b)
        data = a / t.data

        def bwd_s(g):
            t.accumulate_grad(-g * data / t.data, fresh=True)

        return _make(data, (t,), bwd_s)

    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), fresh=True)

    return _make(data, (a, b), bwd)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False)

    def bwd(g):
        x.accumulate_grad(np.where(mask, g, 0.0), fresh=True)

    return _make(data, (x,), bwd)


def gelu(x):
    """Gaussian error linear unit (tanh approximation)."""
    x = as_tensor(x)
    c = 0.7978845608028654  # sqrt(2/pi)
    v = x.data
    v2 = v * v
    t = np.tanh(c * (v + 0.044715 * (v2 * v)))
    data = 0.5 * v * (1.0 + t)

    def bwd(g):
        dinner = c * (1.0 + 0.134145 * v2)
        dx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        x.accumulate_grad(g * dx, fresh=True)

    return _make(data, (x,), bwd)


def sigmoid(x):
    x = as_tensor(x)
    data = _sigmoid_np(x.data)

    def bwd(g):
        x.accumulate_grad(g * data * (1.0 - data), fresh=True)

    return _make(data, (x,), bwd)


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x):
    """log(1 + exp(x)), computed stably; derivative is sigmoid."""
    x = as_tensor(x)
    v = x.data
    data = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def bwd(g):
        x.accumulate_grad(g * _sigmoid_np(v), fresh=True)

    return _make(data, (x,), bwd)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        x.accumulate_grad(g * data, fresh=True)

    return _make(data, (x,), bwd)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def bwd(g):
        x.accumulate_grad(g / x.data, fresh=True)

    return _make(data, (x,), bwd)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bwd(g):
        x.accumulate_grad(g * 0.5 / data, fresh=True)

    return _make(data, (x,), bwd)


def clip01(x):
    """Clamp to [0, 1] with straight-through gradient inside the bounds."""
    x = as_tensor(x)
    data = np.clip(x.data, 0.0, 1.0)
    mask = (x.data >= 0.0) & (x.data <= 1.0)

    def bwd(g):
        x.accumulate_grad(np.where(mask, g, 0.0), fresh=True)

    return _make(data, (x,), bwd)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x.accumulate_grad(data * (g - dot), fresh=True)

    return _make(data, (x,), bwd)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def bwd(g):
        x.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True), fresh=True)

    return _make(data, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy(), fresh=True)
            return
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g2, x.data.shape).copy(), fresh=True)

    return _make(data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(n))


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        x.accumulate_grad(g.reshape(x.data.shape))

    return _make(data, (x,), bwd)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        x.accumulate_grad(np.transpose(g, inv))

    return _make(data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make(data, tuple(tensors), bwd)


def getitem(x, idx):
    x = as_tensor(x)
    data = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x.accumulate_grad(full)

    return _make(data, (x,), bwd)


def matmul(a, b):
    """Matrix product supporting 2-D and identically-batched N-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    data = _mm(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = _mm(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape), fresh=True)
        if b.requires_grad:
            gb = _mm(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape), fresh=True)

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad2d(x, pad):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:-pad, pad:-pad] = x
    return out


def _im2col(x, kh, kw, stride, pad):
    """Receptive-field matrix (N, C*kh*kw, Ho*Wo) for each batch item."""
    x = _pad2d(x, pad)
    n, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = pool.get((n, c * kh * kw, ho * wo), x.dtype)
    np.copyto(cols.reshape(windows.shape), windows)
    return cols, ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad):
    """Transpose of im2col: accumulate (N, C*kh*kw, Ho*Wo) into image layout."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = pool.get((n, c, hp, wp), dcols.dtype)
    xp.fill(0)
    v = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += v[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])
    return xp.copy() if pool.enabled else xp


def _conv1x1(x, weight, bias, parents):
    n, cin, h, w = x.data.shape
    cout = weight.data.shape[0]
    wmat = weight.data.reshape(cout, cin)
    xr = x.data.reshape(n, cin, h * w)
    out = _mm(wmat, xr)
    if bias is not None:
        out += bias.data[:, None]
    data = out.reshape(n, cout, h, w)

    def bwd(g):
        g3 = g.reshape(n, cout, h * w)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g3.sum(axis=(0, 2)), fresh=True)
        if weight.requires_grad:
            dw = _mm(g3, xr.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(dw.reshape(weight.data.shape), fresh=True)
        if x.requires_grad:
            dx = _mm(wmat.T, g3)
            x.accumulate_grad(dx.reshape(x.data.shape), fresh=True)

    return _make(data, parents, bwd)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution (cross-correlation) via im2col and batched GEMM.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,) or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias, parents)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    k = cin * kh * kw
    wmat = weight.data.reshape(cout, k)
    out = _mm(wmat, cols)                             # (N, Cout, Ho*Wo)
    if bias is not None:
        out += bias.data[:, None]
    data = out.reshape(n, cout, ho, wo)

    def bwd(g):
        hw = ho * wo
        g3 = g.reshape(n, cout, hw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g3.sum(axis=(0, 2)), fresh=True)
        if weight.requires_grad:
            # Choose the dW contraction layout minimizing the intermediate:
            # batched (N, Cout, K) product vs. flattening the batch into the
            # contraction via two small transposed copies.
            if n * cout * k <= 2 * n * (cout + k) * hw:
                dw = _mm(g3, cols.transpose(0, 2, 1)).sum(axis=0)
                weight.accumulate_grad(dw.reshape(weight.data.shape), fresh=True)
            else:
                g2 = np.ascontiguousarray(g3.transpose(1, 0, 2)).reshape(cout, n * hw)
                cols2 = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(k, n * hw)
                dw = _mm(g2, cols2.T)
                weight.accumulate_grad(dw.reshape(weight.data.shape).copy()
                                       if pool.enabled else dw.reshape(weight.data.shape),
                                       fresh=True)
        if x.requires_grad:
            dcols = _mm(wmat.T, g3)
            x.accumulate_grad(
                _col2im(dcols, x.data.shape, kh, kw, stride, padding), fresh=True)

    return _make(data, parents, bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over (N, C, H, W); statistics per sample per channel group."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.data.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m = dxhat.mean(axis=2, keepdims=True)
            mx = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = inv * (dxhat - m - xh * mx)
            x.accumulate_grad(dx.reshape(n, c, h, w), fresh=True)

    return _make(data, (x, gamma, beta), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """LayerNorm over the last axis of ``x``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m = dxhat.mean(axis=-1, keepdims=True)
            mx = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m - xhat * mx), fresh=True)

    return _make(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=128)
def _interp_matrix_cached(n_in, n_out, dtype_str):
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m.astype(np.dtype(dtype_str))


def linear_interp_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    return _interp_matrix_cached(int(n_in), int(n_out), np.dtype(dtype).str)


def upsample_bilinear(x, out_h, out_w):
    """Bilinear resize of (N, C, H, W) expressed as two interpolation GEMMs.

    The backward pass is the exact transpose operator, so no scatter-adds are
    needed and gradients are bitwise deterministic.
    """
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    ry = linear_interp_matrix(h, out_h, x.data.dtype)
    rx = linear_interp_matrix(w, out_w, x.data.dtype)
    m = n * c
    # columns then rows, each as a single large GEMM
    u = _mm(x.data.reshape(m * h, w), rx.T).reshape(m, h, out_w)
    ut = np.ascontiguousarray(u.transpose(1, 0, 2)).reshape(h, m * out_w)
    v = _mm(ry, ut).reshape(out_h, m, out_w)
    data = np.ascontiguousarray(v.transpose(1, 0, 2)).reshape(n, c, out_h, out_w)

    def bwd(g):
        gf = g.reshape(m, out_h, out_w)
        gt = np.ascontiguousarray(gf.transpose(1, 0, 2)).reshape(out_h, m * out_w)
        t = _mm(ry.T, gt).reshape(h, m, out_w)
        tt = np.ascontiguousarray(t.transpose(1, 0, 2)).reshape(m * h, out_w)
        dx = _mm(tt, rx).reshape(n, c, h, w)
        x.accumulate_grad(dx, fresh=True)

    return _make(data, (x,), bwd)
