"""Dense tensors with a tape for reverse-mode differentiation.

Values live in C-ordered numpy arrays. Operations executed while a
:class:`Tape` is active (and touching at least one tensor that requires a
gradient) are appended to that tape in execution order, so the tape is a
topologically sorted DAG; :meth:`Tape.backward` walks it in exact reverse.

Typical use::

    with Tape() as tape:
        loss = model.loss(batch)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StaleTapeError(RuntimeError):
    """A tape was replayed after its saved activations were released."""


class DivergenceError(FloatingPointError):
    """A non-finite value appeared where a finite one was required."""


_tape_stack: list = []


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block, even if a tape is active."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = False
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, dtype=dtype)
        self.requires_grad = True
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.grad.shape != self.data.shape or self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "shape")

    def __init__(self, op, inputs, backward_fn, shape):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.shape = shape


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise StaleTapeError("cannot record onto a tape that has already been replayed")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def record(self, op, inputs, backward_fn, out):
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(TapeNode(op, inputs, backward_fn, out.data.shape))

    def backward(self, loss: Tensor):
        if self.consumed:
            raise StaleTapeError("backward already ran on this tape; run the forward pass again")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss._node: np.ones_like(loss.data)}
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += ig
                elif inp._tape is self:
                    prev = grads.get(inp._node)
                    grads[inp._node] = ig if prev is None else prev + ig
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor):
    """Populate ``.grad`` on every Parameter reachable from ``loss``."""
    if loss._tape is None:
        raise StaleTapeError("loss carries no tape; was it computed inside `with Tape()`?")
    loss._tape.backward(loss)


def _wrap(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and np.isscalar(x) else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(op, data, inputs, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._tape = None
    out._node = None
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                tape.record(op, inputs, backward_fn, out)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False with ``value``."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    shape = x.shape
    return _make("masked_fill", out, (x,), lambda g: (_unbroadcast(g * keep, shape),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. A no-op unless ``training`` and ``p > 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit RNG stream")
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    m = keep * scale
    return _make("dropout", x.data * m, (x,), lambda g: (g * m,))


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight``; ids of any shape."""
    ids = np.asarray(ids)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.max()) if ids.max() >= n else int(ids.min())
        raise IndexError(f"token id {bad} outside vocabulary of size {n}")
    shape = weight.shape

    def bwd(g):
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return _make("embedding", weight.data[ids], (weight,), bwd)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``[.., p, q] @ [.., q, r] -> [.., p, r]``.

    Leading batch extents broadcast; both operands need at least two dims.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation / probabilities ------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit population variance.

    ``eps`` is added to the variance inside the square root.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxh = g * gd
            dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True)
                         - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make("layer_norm", out, (x, gain, bias), bwd)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_ls(logits: Tensor, targets, smoothing: float = 0.0, pad_id: int = 0,
                     reduction: str = "mean") -> Tensor:
    """Label-smoothed token cross-entropy, pad positions excluded.

    Per token: ``(1 - smoothing) * NLL(target) + smoothing * mean_v NLL(v)``.
    ``reduction="mean"`` divides by the number of non-pad tokens, ``"sum"``
    does not.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id {int(targets.max())} outside vocabulary of size {V}")
    keep = targets != pad_id
    n_tok = int(keep.sum())
    logp = log_softmax_np(logits.data)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    smooth = -logp.mean(axis=-1)
    per_tok = (1.0 - smoothing) * nll + smoothing * smooth
    total = (per_tok * keep).sum()
    denom = max(n_tok, 1) if reduction == "mean" else 1
    out = np.asarray(total / denom, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(logp)
        grad = p - smoothing / V
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - (1.0 - smoothing),
                          axis=-1)
        grad *= keep[..., None] * (g / denom)
        return (grad.astype(logits.dtype, copy=False),)

    return _make("cross_entropy", out, (logits,), bwd)


# -- verification -----------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-6,
               oracle_dtype=np.longdouble) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    The analytic gradient is taken in the parameters' own (64-bit) precision.
    The finite-difference side evaluates ``f`` with parameters promoted to
    ``oracle_dtype`` so its rounding noise stays well below the tolerance,
    including on gradients that are zero by symmetry. Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs 64-bit parameters; {p.name} is {p.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise DivergenceError("loss is not finite at the check point")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    saved = [p.data for p in params]
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(oracle_dtype)
        with no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                a_flat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f().data
                    flat[i] = orig - h
                    fm = f().data
                    flat[i] = orig
                    num = float((fp - fm) / (2 * h))
                    if not math.isfinite(num):
                        raise DivergenceError(f"non-finite loss while perturbing {p.name}[{i}]")
                    ai = float(a_flat[i])
                    err = abs(ai - num) / max(abs(ai), abs(num), 1e-8)
                    worst = max(worst, err)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return worst


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    total = 0.0
    for a in arrays:
        a = a.astype(np.float64, copy=False).reshape(-1)
        total += float(np.dot(a, a))
    return math.sqrt(total)
