"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float32 numpy arrays (other float dtypes are preserved, which
lets tests run the same graphs in float64). Every operation that consumes a
tensor with ``requires_grad`` records a node on the implicit graph; calling
``backward`` on a scalar result fills ``grad`` on every reachable leaf.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``_parents`` holds the input tensors of the producing operation and
    ``_backward`` the closure that routes the upstream gradient to them.
    Leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None,
                 name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.reshape(self.data.shape)

    def backward(self):
        """Reverse-mode sweep. Gradients accumulate additively on leaves."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward: loss must be scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def clear_intermediate_grads(self):
        """Set grad to None on every non-leaf node reachable from here.

        Two backward sweeps over graphs that share a subtree would otherwise
        re-propagate the first sweep's gradients, still sitting on shared
        intermediates, into the leaves a second time. Clearing intermediates
        (leaves keep their accumulated grads) makes a second sweep purely
        additive on the leaves.
        """
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                node.grad = None
            stack.extend(node._parents)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b_data, a_data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a_data, b_data.shape))

    return _make(out, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    # np.maximum (unlike np.where on the mask) propagates NaNs, so bad
    # values surface in the loss instead of being silently zeroed
    return _make(np.maximum(x.data, 0), (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return _make(out, (x,), backward)


def square(x):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g * 2.0 * x.data)

    return _make(x.data * x.data, (x,), backward)


# -- reductions ------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes) if axes else g
        x._accumulate(np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)
    n = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims) if axes else x.data.copy()

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes) if axes else g
        x._accumulate(np.broadcast_to(gg, x.data.shape) / n)

    return _make(out, (x,), backward)


def prod(x, axis):
    """Product reduction over one axis.

    The backward rule uses exclusive prefix/suffix cumulative products, so it
    stays finite when a factor is exactly zero (no division by the output).
    """
    x = as_tensor(x)
    axis = axis % x.data.ndim
    out = x.data.prod(axis=axis)
    d = x.data
    mv = np.moveaxis(d, axis, 0)
    ones = np.ones_like(mv[:1])
    prefix = np.concatenate([ones, np.cumprod(mv[:-1], axis=0)], axis=0)
    suffix = np.concatenate(
        [np.cumprod(mv[:0:-1], axis=0)[::-1], ones], axis=0)
    loo = np.moveaxis(prefix * suffix, 0, axis)  # leave-one-out products

    def backward(g):
        x._accumulate(np.expand_dims(g, axis) * loo)

    return _make(out, (x,), backward)


def channel_norm(x, axis, eps=1e-10):
    """L2-normalize vectors along ``axis``: x / sqrt(sum(x^2) + eps)."""
    x = as_tensor(x)
    axis = axis % x.data.ndim
    s = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / s

    def backward(g):
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        x._accumulate(g / s - x.data * dot / (s * s * s))

    return _make(out, (x,), backward)


# -- shape manipulation ------------------------------------------------------------

def reshape(x, *shape):
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}")

    def backward(g):
        x._accumulate(g.reshape(old))

    return _make(out, (x,), backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}")

    def backward(g):
        x._accumulate(_unbroadcast(g, x.data.shape))

    return _make(out, (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    _check(len(tensors) > 0, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, tuple(tensors), backward)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check(a.data.ndim == 2 and b.data.ndim == 2
           and a.data.shape[1] == b.data.shape[0], "matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out, (a, b), backward)


# -- convolution and pooling -----------------------------------------------------

def _im2col(x_nchw, kh, kw, stride, pad):
    """Channels-last window extraction; returns (n*oh*ow, kh*kw*c) cols."""
    n, c, h, w = x_nchw.shape
    xh = np.ascontiguousarray(x_nchw.transpose(0, 2, 3, 1))
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    sn, sh, sw, sc = xh.strides
    windows = np.lib.stride_tricks.as_strided(
        xh, (n, oh, ow, kh, kw, c),
        (sn, sh * stride, sw * stride, sh, sw, sc))
    return windows.reshape(n * oh * ow, kh * kw * c), oh, ow


def _col2im(gcols, x_shape, kh, kw, stride, pad):
    """Scatter-add of window gradients back onto the (N, C, H, W) input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((n, hp, wp, c), dtype=gcols.dtype)
    gcols = gcols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += \
                gcols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:hp - pad, pad:wp - pad, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D convolution (cross-correlation), NCHW layout.

    ``x``: (N, C, H, W); ``weight``: (O, C, kh, kw); ``bias``: (O,) or None.
    Internally uses channels-last windows for cache-friendly GEMMs.
    """
    x, weight = as_tensor(x), as_tensor(weight, like=x)
    _check(x.data.ndim == 4 and weight.data.ndim == 4
           and x.data.shape[1] == weight.data.shape[1],
           "conv2d", x.shape, weight.shape)
    n, c, h, w = x.data.shape
    o, _, kh, kw = weight.data.shape
    _check(h + 2 * pad >= kh and w + 2 * pad >= kw, "conv2d", x.shape, weight.shape)
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = np.ascontiguousarray(
        weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c, o)
    out = np.ascontiguousarray(
        (cols @ wmat).reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    if bias is not None:
        bias = as_tensor(bias, like=x)
        _check(bias.data.shape == (o,), "conv2d", bias.shape)
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(o, kh, kw, c)
            weight._accumulate(np.ascontiguousarray(gw.transpose(0, 3, 1, 2)))
        if x.requires_grad:
            gcols = gmat @ wmat.T
            x._accumulate(_col2im(gcols, x.data.shape, kh, kw, stride, pad))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


def maxpool2d(x, size=2):
    """Non-overlapping 2-D max pool; spatial dims must divide by ``size``."""
    x = as_tensor(x)
    _check(x.data.ndim == 4, "maxpool2d", x.shape)
    n, c, h, w = x.data.shape
    _check(h % size == 0 and w % size == 0, "maxpool2d", x.shape)
    oh, ow = h // size, w // size
    win = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, oh, ow, size * size), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(n, c, h, w))

    return _make(out, (x,), backward)


# -- optimizer -------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction; updates in place, keeps grads."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ValueError(
                    f"adam_step: parameter {p.name or i} has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flat view of optimizer state for checkpointing."""
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t, m, v):
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ValueError("adam state length mismatch")
        self.t = int(t)
        self.m = [np.asarray(a, dtype=np.float32).reshape(p.data.shape)
                  for a, p in zip(m, self.params)]
        self.v = [np.asarray(a, dtype=np.float32).reshape(p.data.shape)
                  for a, p in zip(v, self.params)]
