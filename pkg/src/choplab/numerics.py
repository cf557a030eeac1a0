"""Dense float64 tensors with a tape-based reverse mode.

Every op takes and returns :class:`Tensor`. When a :class:`Tape` is active
and at least one input is tracked, the op appends a record holding the
closure that maps the output adjoint to input adjoints. ``backward`` walks
the records in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "tracked", "name")

    def __init__(self, value, tracked: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tracked = tracked
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops, usable as a context manager."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.leaves: dict[str, Tensor] = {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, value, name: str) -> Tensor:
        if name in self.leaves:
            raise KeyError(f"leaf {name!r} already watched")
        t = Tensor(value, tracked=True, name=name)
        self.leaves[name] = t
        return t

    def watch_all(self, arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
        return {k: self.watch(v, prefix + k) for k, v in arrays.items()}

    def __len__(self):
        return len(self.records)


def _record(out_value, parents, backward_fn) -> Tensor:
    if _ACTIVE and any(p.tracked for p in parents):
        out = Tensor(out_value, tracked=True)
        _ACTIVE[-1].records.append((out, parents, backward_fn))
        return out
    return Tensor(out_value)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for every watched leaf.

    Leaves that the loss does not reach get a zero gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, parents, fn in reversed(tape.records):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.tracked:
                continue
            key = id(p)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return {
        name: adj.get(id(t), np.zeros_like(t.value)).reshape(t.shape)
        for name, t in tape.leaves.items()
    }


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv, (a, b),
        lambda g: (
            _unbroadcast(g * bv, a.shape) if a.tracked else None,
            _unbroadcast(g * av, b.shape) if b.tracked else None,
        ),
    )


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.

    The gradient differentiates this same form.
    """
    x = as_tensor(x)
    v = x.value
    u = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _record(out, (x,), fn)


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(np.abs(v), (x,), lambda g: (g * np.sign(v),))


# shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def take_index(x: Tensor, index: int, axis: int) -> Tensor:
    """``x`` indexed at ``index`` along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    out = np.take(x.value, index, axis=axis)

    def fn(g):
        full = np.zeros_like(x.value)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (x,), fn)


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.value for t in xs], axis=axis)
    return _record(
        out, tuple(xs),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))),
    )


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.value[ids]

    def fn(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _record(out, (table,), fn)


# reductions ----------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.value.size
    return _record(np.mean(x.value), (x,), lambda g: (np.full(shape, g / n),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    out = x.value.mean(axis=axis)

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _record(out, (x,), fn)


# linear algebra ------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a single GEMM for (..., m, k) @ (k, n); numpy would loop over the batch
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes of ``a`` batch against a 2-D or batched ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    out = _mm(av, bv)

    def fn(g):
        ga = gb = None
        if a.tracked:
            ga = _unbroadcast(_mm(g, np.swapaxes(bv, -1, -2)), a.shape)
        if b.tracked:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed on max-shifted rows."""
    x = as_tensor(x)
    v = x.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    v = x.value
    if gain.shape != v.shape[-1:] or bias.shape != v.shape[-1:]:
        raise ValueError("gain/bias must match the last extent")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def fn(g):
        gx = gg = gb = None
        if gain.tracked:
            gg = (g * xhat).reshape(-1, v.shape[-1]).sum(axis=0)
        if bias.tracked:
            gb = g.reshape(-1, v.shape[-1]).sum(axis=0)
        if x.tracked:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gain, bias), fn)


# losses --------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows of ``logits``."""
    logits = as_tensor(logits)
    v = logits.value
    labels = np.asarray(labels)
    n = v.shape[0]
    z = v - v.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record(loss, (logits,), fn)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    v = logits.value
    y = np.asarray(targets, dtype=DTYPE)
    # log(1 + exp(-|v|)) form is overflow-free
    loss = (np.maximum(v, 0.0) - v * y + np.log1p(np.exp(-np.abs(v)))).mean()

    def fn(g):
        e = np.exp(-np.abs(v))
        s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * (s - y) / v.size,)

    return _record(loss, (logits,), fn)


# optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        st = cls(**kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter dict.

    ``state`` is advanced in place. ``lr`` overrides ``state.lr`` for this
    step (used by schedules).
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        new[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm
