"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every differentiable computation in the package (the level-set evolution and
the convolutional backbone) is written against :class:`Array`.  Arrays that
descend from a :meth:`Tape.variable` are recorded on that tape; everything
else is a plain constant and the same code path simply computes forward
values.  Gradients come from :meth:`Tape.gradient`, which walks the tape in
reverse creation order, so accumulation order is fixed and results are
bitwise reproducible.

Example
-------
>>> tape = Tape()
>>> x = tape.variable(np.array([1.0, 2.0]))
>>> loss = sum(x * x)
>>> tape.gradient(loss, [x])[0]
array([2., 4.])
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

GUARD = 1e-8

__all__ = [
    "GUARD", "ShapeError", "Array", "Tape", "constant",
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "arctan", "sigmoid",
    "relu", "softplus", "clip", "sum", "mean", "reshape", "concat",
    "central_diff", "conv2d", "box_filter_masked", "batch_norm", "resize",
    "downsample2", "upsample2", "stop_gradient", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@dataclass
class _Node:
    op: str
    inputs: tuple
    vjp: Callable | None


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in evaluation order, which is a valid topological
    order by construction.  A fresh tape is meant to be built for every
    training step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    def variable(self, data, dtype=None) -> Array:
        """Register ``data`` as a differentiable leaf."""
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        return Array(arr, self, node)

    def _record(self, op, out, inputs, vjp) -> Array:
        node = len(self.nodes)
        ids = tuple(x.node if x.tape is self else None for x in inputs)
        self.nodes.append(_Node(op, ids, vjp))
        return Array(out, self, node)

    def backward(self, loss: Array) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) to every node reachable from ``loss``.

        Returns the gradient map keyed by node id; it is also kept on
        ``self.grads``.
        """
        if not isinstance(loss, Array) or loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss.node: np.ones_like(loss.data)}
        for i in range(loss.node, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp is None or gi is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = np.asarray(gi) if prev is None else prev + gi
        self.grads = grads
        return grads

    def gradient(self, loss: Array, sources: Sequence[Array]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. ``sources`` (zeros when unreachable)."""
        grads = self.backward(loss)
        out = []
        for s in sources:
            g = grads.get(s.node) if s.tape is self else None
            out.append(np.zeros_like(s.data) if g is None else np.array(g, dtype=s.dtype))
        return out


class Array:
    """Immutable dense array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        data = np.asarray(data)
        if data.flags.writeable and data.base is None:
            data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f"node={self.node}" if self.tracked else "const"
        return f"Array({self.data!r}, {tag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _frozen(x, dtype=None) -> np.ndarray:
    # caller-owned buffers are copied so that freezing never leaks back to the caller
    a = np.asarray(x, dtype=dtype)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


def constant(data, dtype=None) -> Array:
    """Wrap ``data`` as an untracked array (writeable inputs are copied)."""
    return Array(_frozen(data, dtype))


def _lift(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    if like is not None:
        return Array(_frozen(x, like.dtype))
    return Array(_frozen(x, np.float64) if np.isscalar(x) else _frozen(x))


def _make(op: str, out: np.ndarray, inputs: Sequence[Array], vjp) -> Array:
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError(f"{op}: operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return Array(out)
    return tape._record(op, out, inputs, vjp)


def _binary_operands(a, b):
    like = a if isinstance(a, Array) else b if isinstance(b, Array) else None
    a, b = _lift(a, like), _lift(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Array:
    a, b = _binary_operands(a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = _binary_operands(a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = _binary_operands(a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b, guard: float = GUARD) -> Array:
    """``a / (b + guard*sign(b))`` with ``sign(0) = +1``; finite for finite input."""
    a, b = _binary_operands(a, b)
    den = b.data + np.where(b.data >= 0, guard, -guard).astype(b.dtype)
    out = a.data / den

    def vjp(g):
        ga = g / den
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make("div", out, (a, b), vjp)


def neg(x) -> Array:
    x = _lift(x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def square(x) -> Array:
    x = _lift(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x, guard: float = GUARD) -> Array:
    """``sqrt(x + guard)``; the guard keeps the derivative finite at zero."""
    x = _lift(x)
    out = np.sqrt(x.data + x.dtype.type(guard))
    return _make("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def arctan(x) -> Array:
    x = _lift(x)
    return _make("arctan", np.arctan(x.data), (x,),
                 lambda g: (g / (1 + x.data * x.data),))


def sigmoid(x) -> Array:
    x = _lift(x)
    out = expit(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def relu(x) -> Array:
    x = _lift(x)
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * pos,))


def softplus(x) -> Array:
    x = _lift(x)
    out = np.logaddexp(x.dtype.type(0), x.data)
    return _make("softplus", out, (x,), lambda g: (g * expit(x.data),))


def clip(x, lo: float, hi: float) -> Array:
    x = _lift(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def stop_gradient(x) -> Array:
    return Array(_lift(x).data)


# -- shape / reduction --------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Array:  # noqa: A001
    x = _lift(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Array:
    x = _lift(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape) -> Array:
    x = _lift(x)
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _getitem(x: Array, idx) -> Array:
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("getitem", np.asarray(x.data[idx]), (x,), vjp)


def concat(xs: Sequence[Array], axis: int = 0) -> Array:
    xs = [_lift(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[x.shape for x in xs]} on axis {axis}") from None
    return _make("concat", out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


# -- linear stencils ----------------------------------------------------------

def central_diff(x, axis: int) -> Array:
    """Central difference with replicated boundary: ``(x[i+1] - x[i-1]) / 2``."""
    x = _lift(x)
    axis = axis % x.ndim
    if x.shape[axis] < 2:
        raise ShapeError(f"central_diff needs at least 2 samples along axis {axis}, got {x.shape}")
    xm = np.moveaxis(x.data, axis, 0)
    out = np.empty_like(xm)
    out[1:-1] = xm[2:] - xm[:-2]
    out[0] = xm[1] - xm[0]
    out[-1] = xm[-1] - xm[-2]
    out *= 0.5

    def vjp(g):
        h = 0.5 * np.moveaxis(g, axis, 0)
        gx = np.zeros_like(h)
        # transpose of the clamped stencil
        gx[1:] += h[:-1]
        gx[-1] += h[-1]
        gx[:-1] -= h[1:]
        gx[0] -= h[0]
        return (np.moveaxis(gx, 0, axis),)

    return _make("central_diff", np.moveaxis(out, 0, axis), (x,), vjp)


def _window_bounds(n: int, r: int):
    idx = np.arange(n)
    return np.minimum(idx + r + 1, n), np.maximum(idx - r, 0)


def _box_sum(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    c = np.cumsum(a, axis=axis)
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 0)
    c = np.pad(c, pad)
    hi, lo = _window_bounds(n, r)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def box_filter_masked(x, radius: int) -> Array:
    """Mean over the in-bounds part of a ``(2r+1)^2`` window (last two axes).

    Normalising by the in-bounds count rather than the window size means
    there is no zero-padding bias at the image border.
    """
    x = _lift(x)
    if x.ndim < 2:
        raise ShapeError(f"box filter needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if radius < 1 or radius >= min(h, w):
        raise ValueError(f"radius {radius} must satisfy 1 <= radius < min(H, W) = {min(h, w)}")
    hi_h, lo_h = _window_bounds(h, radius)
    hi_w, lo_w = _window_bounds(w, radius)
    count = np.outer(hi_h - lo_h, hi_w - lo_w).astype(x.dtype)

    def box(a):
        return _box_sum(_box_sum(a, radius, -2), radius, -1)

    out = box(x.data) / count
    return _make("box_filter_masked", out, (x,), lambda g: (box(g / count),))


# -- network primitives -------------------------------------------------------

def conv2d(x, w, b=None, dilation: int = 1, stride: int = 1) -> Array:
    """Zero-padded "same" cross-correlation, NCHW input, OIHW kernel."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if dilation < 1 or stride < 1:
        raise ValueError("dilation and stride must be positive")
    d, s = dilation, stride
    p = d * (k - 1) // 2
    ho, wo = (h - 1) // s + 1, (wd - 1) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    taps = [(i, j) for i in range(k) for j in range(k)]
    cols = np.empty((bsz, cin, k * k, ho, wo), dtype=x.dtype)
    for t, (i, j) in enumerate(taps):
        cols[:, :, t] = xp[:, :, i * d:i * d + (ho - 1) * s + 1:s, j * d:j * d + (wo - 1) * s + 1:s]
    cols = cols.reshape(bsz, cin * k * k, ho * wo)
    wm = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols)
    inputs = [x, w]
    if b is not None:
        b = _lift(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {cout} output channels")
        out += b.data[None, :, None]
        inputs.append(b)
    out = out.reshape(bsz, cout, ho, wo)

    def vjp(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wm.T, g2).reshape(bsz, cin, k * k, ho, wo)
        gxp = np.zeros((bsz, cin, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gxp[:, :, i * d:i * d + (ho - 1) * s + 1:s, j * d:j * d + (wo - 1) * s + 1:s] += gcols[:, :, t]
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return _make("conv2d", out, inputs, vjp)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               update_stats: bool = True) -> Array:
    """Per-channel batch normalisation of an NCHW array.

    In training mode the batch statistics are used and, when
    ``update_stats`` is set, ``running_mean``/``running_var`` are updated in
    place as ``momentum * old + (1 - momentum) * batch``.  That update is
    not part of the differentiable graph.
    """
    x, gamma, beta = _lift(x), _lift(gamma, x), _lift(beta, x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    bsz, c = x.shape[:2]
    if bsz == 0:
        raise ValueError("batch_norm on an empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm params {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0, 2, 3)
    n = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv / n)[None, :, None, None] * (
                n * gxhat - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _make("batch_norm", out, (x, gamma, beta), vjp)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel bilinear, edge-clamped: out[2k] = .25 x[k-1] + .75 x[k], out[2k+1] = .75 x[k] + .25 x[k+1]
    m = np.zeros((2 * n, n), dtype=dtype)
    for k in range(n):
        m[2 * k, max(k - 1, 0)] += 0.25
        m[2 * k, k] += 0.75
        m[2 * k + 1, k] += 0.75
        m[2 * k + 1, min(k + 1, n - 1)] += 0.25
    return m


def upsample2(x) -> Array:
    """Bilinear x2 upsampling over the last two axes."""
    x = _lift(x)
    uh = _upsample_matrix(x.shape[-2], x.dtype)
    uw = _upsample_matrix(x.shape[-1], x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return _make("upsample2", out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def downsample2(x) -> Array:
    """2x2 average pooling over the last two axes."""
    x = _lift(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even spatial dims, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def vjp(g):
        gq = (g * 0.25)[..., :, None, :, None]
        return (np.broadcast_to(gq, (*lead, h // 2, 2, w // 2, 2)).reshape(x.shape),)

    return _make("downsample2", out, (x,), vjp)


def resize(x, factor: float) -> Array:
    """Resize by a power of two: bilinear up for ``factor > 1``, average-pool down otherwise."""
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    k = np.log2(factor)
    if k != round(k):
        raise ValueError(f"resize factor must be a power of two, got {factor}")
    k = int(round(k))
    step = upsample2 if k > 0 else downsample2
    for _ in range(abs(k)):
        x = step(x)
    return _lift(x)


# -- verification -------------------------------------------------------------

def grad_check(f: Callable[[Array], Array], x, h: float = 1e-5, indices=None,
               oracle_dtype=None) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|a - c| / max(|a|, |c|, 1e-8)``.
    ``indices`` restricts the comparison to selected flat coordinates.
    The tape gradient is always computed in float64.  ``oracle_dtype``
    (for example ``np.longdouble``) evaluates the central differences in a
    wider type, which removes the ``ulp(f) / 2h`` rounding floor of the
    oracle for coordinates whose gradient is tiny.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.variable(x)
    analytic = tape.gradient(f(xv), [xv])[0].ravel()
    probe = x.astype(oracle_dtype or np.float64)
    flat = probe.ravel()
    step = flat.dtype.type(h)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(constant(probe)).data
        flat[i] = orig - step
        fm = f(constant(probe)).data
        flat[i] = orig
        cd = float((fp - fm) / (2 * step))
        a = analytic[i]
        err = abs(a - cd) / builtins.max(abs(a), abs(cd), 1e-8)
        worst = builtins.max(worst, err)
    return worst
