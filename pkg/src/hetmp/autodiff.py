"""Dense float64 tensors with a recording tape and reverse-mode gradients.

A :class:`Tape` is created per forward pass. Parameters are registered by
name, every primitive appends one node holding its adjoint rule, and
:meth:`Tape.grad` walks the record backwards.

    tape = Tape()
    w = tape.param("w", np.ones((2, 2)))
    loss = (w * w).sum() * 0.5
    tape.grad(loss)["w"]      # == w
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "tape", "parents", "backward", "name")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape", parents=(), backward=None, name=None):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive applications plus a parameter registry."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.check_finite = check_finite

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            return self.params[name]
        t = Tensor(np.array(value, dtype=DTYPE), self, name=name)
        self.params[name] = t
        return t

    def params_from(self, values: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in values.items()}

    def release(self) -> None:
        """Drop the recorded nodes (they form reference cycles with the tape)."""
        self.nodes.clear()

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=DTYPE), self)

    def record(self, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        data = np.asarray(data, dtype=DTYPE)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite value produced during forward pass")
        out = Tensor(data, self, tuple(parents), backward)
        self.nodes.append(out)
        return out

    def grad(self, loss: Tensor, wrt: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter.

        Parameters that do not influence the loss get a zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        names = self.params if wrt is None else wrt
        return {
            name: grads.get(id(self.params[name]), np.zeros_like(self.params[name].data))
            for name in names
        }


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one argument must be a Tensor")


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    ad, bd = a.data, b.data
    return tape.record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    ad, bd = a.data, b.data
    out = ad / bd
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return a.tape.record(-a.data, (a,), lambda g: (-g,))


def hadamard_mask(a: Tensor, mask) -> Tensor:
    """Multiply by a constant (typically binary) mask."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    return a.tape.record(a.data * m, (a,), lambda g: (_unbroadcast(g * m, a.shape),))


# ---------------------------------------------------------------------------
# unary nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape.record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape.record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return a.tape.record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return a.tape.record(a.data * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / max(count, 1))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return tape.record(ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return a.tape.record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return a.tape.record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.tape.record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return a.tape.record(a.data[index], (a,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return tape.record(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def _scatter_matrix(index: np.ndarray, size: int) -> sparse.csr_matrix:
    """Sparse [size, len(index)] matrix summing entry i into row index[i]."""
    m = len(index)
    return sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(size, m))


def _scatter_rows(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    flat = values.reshape(len(index), int(np.prod(values.shape[1:], dtype=np.int64)))
    out = _scatter_matrix(index, size) @ flat
    return np.asarray(out).reshape((size,) + values.shape[1:])


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    return a.tape.record(a.data[index], (a,), lambda g: (_scatter_rows(g, index, n),))


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Scatter-add rows of ``a`` into ``num_segments`` buckets."""
    segments = np.asarray(segments, dtype=np.intp)
    out = _scatter_rows(a.data, segments, num_segments)
    return a.tape.record(out, (a,), lambda g: (g[segments],))


# ---------------------------------------------------------------------------
# composite numerics


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return a.tape.record(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return a.tape.record(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def segment_softmax(logits: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector within each segment."""
    segments = np.asarray(segments, dtype=np.intp)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, logits.data)
    shifted = logits - seg_max[segments]
    e = exp(shifted)
    denom = segment_sum(e, segments, num_segments)
    return e / take(denom, segments)


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit norm; vectors with
    norm below ``eps`` map to zero (and pass zero gradient)."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    live = norm >= eps
    safe = np.where(live, norm, 1.0)
    u = np.where(live, a.data / safe, 0.0)

    def backward(g):
        proj = (u * g).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - u * proj) / safe, 0.0),)

    return a.tape.record(u, (a,), backward)


def detach(a: Tensor) -> Tensor:
    return a.tape.constant(a.data.copy())


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if p >= 1.0:
        return hadamard_mask(a, np.zeros(a.shape))
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return hadamard_mask(a, keep)


def batch_norm(
    a: Tensor,
    weight: Tensor,
    bias: Tensor,
    running: dict[str, np.ndarray] | None = None,
    train: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise over every axis but the last.

    In train mode batch statistics are used and ``running`` (if given) is
    updated in place; in eval mode ``running`` supplies the statistics.
    """
    axes = tuple(range(a.ndim - 1))
    if train:
        mu = mean(a, axis=axes, keepdims=True)
        centred = a - mu
        var = mean(square(centred), axis=axes, keepdims=True)
        normed = centred / sqrt(var + eps)
        if running is not None:
            running["mean"] = (1 - momentum) * running["mean"] + momentum * mu.data.reshape(-1)
            running["var"] = (1 - momentum) * running["var"] + momentum * var.data.reshape(-1)
    else:
        if running is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        normed = (a - running["mean"]) / np.sqrt(running["var"] + eps)
    return normed * weight + bias


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 convolution; x [B, C, H, W], w [O, C, k, k], k odd."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: {xd.shape} * {wd.shape}")
    k = wd.shape[-1]
    pad = k // 2
    H, W = xd.shape[2], xd.shape[3]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", patches, wd, optimize=True)

    def backward(g):
        gw = np.einsum("bohw,bchwij->ocij", g, patches, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + H, j : j + W] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j])
        return gxp[:, :, pad : pad + H, pad : pad + W], gw

    y = x.tape.record(out, (x, w), backward)
    if b is not None:
        y = y + reshape(b, (1, -1, 1, 1))
    return y


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the (masked) rows."""
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(len(labels)) if mask is None else np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("cross_entropy over an empty mask")
    onehot = np.zeros(logits.shape)
    onehot[rows, labels[rows]] = 1.0 / len(rows)
    return -sum_(hadamard_mask(log_softmax(logits, axis=-1), onehot))
