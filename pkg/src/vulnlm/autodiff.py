"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the op graph as it is built; calling
backward() on a scalar loss walks the graph in reverse topological order and
accumulates gradients into every reachable leaf with requires_grad set.
Precision is whatever dtype the wrapped arrays carry: float32 for training,
float64 when an oracle needs headroom.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf as _erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, benchmarks)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "decay", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        # weight-decay tag, set by parameter constructors; None means "not a parameter"
        self.decay = None
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------ basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            # free interior references so big graphs collect promptly
            node._backward = None
            node._parents = ()

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(-self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        return mul(self, _wrap(other) ** -1.0)

    def __rtruediv__(self, other):
        return _wrap(other) * self ** -1.0

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return take(self, idx)

    # ------------------------------------------------------------ reductions

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return mul_scalar(tsum(self, axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return power(self, 0.5)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, backward) -> Tensor:
    """Build a graph node, or a constant when recording is off / no parent needs grad."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------- core ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out = _node(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out = _node(out_data, (a, b), backward)
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    out = _node(out_data, (a,), backward)
    return out


def power(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * p * a.data ** (p - 1.0))

    out = _node(out_data, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast_mat(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast_mat(gb, b.data.shape))

    out = _node(out_data, (a, b), backward)
    return out


def _unbroadcast_mat(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Like _unbroadcast, but the trailing two axes are matrix axes (never summed)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax in range(max(0, len(shape) - 2)):
        if shape[ax] == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out = _node(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    out = _node(out_data, (a,), backward)
    return out


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward():
        if a.requires_grad:
            a._accumulate(np.transpose(out.grad, inv))

    out = _node(out_data, (a,), backward)
    return out


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out_data.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(sl)])

    out = _node(out_data, tuple(tensors), backward)
    return out


def take(a: Tensor, idx) -> Tensor:
    """Indexing/gather; duplicate indices accumulate in the backward pass."""
    out_data = a.data[idx]

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

    out = _node(out_data, (a,), backward)
    return out


def scatter_rows(values: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place values[k] at output row rows[k]; duplicate rows accumulate."""
    out_data = np.zeros((n_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out_data, rows, values.data)

    def backward():
        if values.requires_grad:
            values._accumulate(out.grad[rows])

    out = _node(out_data, (values,), backward)
    return out


# ------------------------------------------------------------ elementwise ops


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out_data)

    out = _node(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out = _node(out_data, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out_data * (1.0 - out_data))

    out = _node(out_data, (a,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - out_data * out_data))

    out = _node(out_data, (a,), backward)
    return out


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    out_data = x * s

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (s + x * s * (1.0 - s)))

    out = _node(out_data, (a,), backward)
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out_data = x * phi

    def backward():
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            a._accumulate(out.grad * (phi + x * pdf))

    out = _node(out_data, (a,), backward)
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward():
        if a.requires_grad:
            s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
            a._accumulate(out.grad * s)

    out = _node(out_data, (a,), backward)
    return out


def elu_plus_one(a: Tensor) -> Tensor:
    """ELU(x) + 1: identity+1 for x >= 0, exp(x) below; strictly positive.

    Floored at the smallest normal float so extreme negative inputs cannot
    underflow the positivity guarantee.
    """
    x = a.data
    tiny = np.finfo(x.dtype if x.dtype.kind == "f" else np.float64).tiny
    e_neg = np.exp(np.minimum(x, 0.0))
    out_data = np.maximum(np.where(x >= 0, x + 1.0, e_neg), tiny)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * np.where(x >= 0, 1.0, e_neg))

    out = _node(out_data, (a,), backward)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction.

    Rejects non-finite input; callers express causal masks as large finite
    negative additions before the call.
    """
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax_rows received non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward():
        if a.requires_grad:
            g = out.grad
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a._accumulate(out_data * (g - dot))

    out = _node(out_data, (a,), backward)
    return out


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("log_softmax received non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse

    def backward():
        if a.requires_grad:
            g = out.grad
            p = np.exp(out_data)
            a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    out = _node(out_data, (a,), backward)
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(mask))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis."""
    m = x.mean(axis=-1, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return centered * inv * gain + bias


# --------------------------------------------------------- selective scan op


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Input-dependent linear recurrence over time (the SSM scan).

        h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * u_t
        y_t = C_t . h_t

    Shapes: u, delta [batch, T, ch]; A [ch, n]; B, C [batch, T, n].
    A discretized by zero-order hold, B by the Euler step delta*B.
    Implemented as one graph node with a hand-derived adjoint recurrence so
    graph size stays independent of T.
    """
    if u.data.ndim != 3 or delta.data.ndim != 3:
        raise ValueError("selective_scan expects u and delta of shape [batch, T, channels]")
    if u.data.shape != delta.data.shape:
        raise ValueError(f"u {u.data.shape} and delta {delta.data.shape} must match")
    bsz, T, ch = u.data.shape
    if A.data.ndim != 2 or A.data.shape[0] != ch:
        raise ValueError(f"A must be [channels={ch}, state]; got {A.data.shape}")
    n = A.data.shape[1]
    if B.data.shape != (bsz, T, n) or C.data.shape != (bsz, T, n):
        raise ValueError(f"B and C must be [batch, T, state={n}]; got {B.data.shape}, {C.data.shape}")
    if np.any(delta.data <= 0):
        raise ValueError("selective_scan requires strictly positive delta")

    dA = np.exp(delta.data[..., None] * A.data)                       # [b,T,ch,n]
    dBu = delta.data[..., None] * B.data[:, :, None, :] * u.data[..., None]
    hs = np.empty((bsz, T, ch, n), dtype=u.data.dtype)
    h = np.zeros((bsz, ch, n), dtype=u.data.dtype)
    y = np.empty((bsz, T, ch), dtype=u.data.dtype)
    for t in range(T):
        h = dA[:, t] * h + dBu[:, t]
        hs[:, t] = h
        y[:, t] = np.einsum("bcn,bn->bc", h, C.data[:, t])

    def backward():
        g = out.grad                                                   # [b,T,ch]
        du = np.zeros_like(u.data) if u.requires_grad else None
        ddelta = np.zeros_like(delta.data) if delta.requires_grad else None
        dAp = np.zeros_like(A.data) if A.requires_grad else None
        dB = np.zeros_like(B.data) if B.requires_grad else None
        dC = np.zeros_like(C.data) if C.requires_grad else None
        dh = np.zeros((bsz, ch, n), dtype=u.data.dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t, :, None] * C.data[:, t, None, :]
            if dC is not None:
                dC[:, t] = np.einsum("bcn,bc->bn", hs[:, t], g[:, t])
            h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(dh)
            da = dh * h_prev                                           # grad wrt dA[:,t]
            if dAp is not None:
                dAp += (da * dA[:, t] * delta.data[:, t, :, None]).sum(axis=0)
            if ddelta is not None:
                ddelta[:, t] = (da * dA[:, t] * A.data).sum(axis=-1) + (
                    dh * B.data[:, t, None, :] * u.data[:, t, :, None]
                ).sum(axis=-1)
            if dB is not None:
                dB[:, t] = (dh * delta.data[:, t, :, None] * u.data[:, t, :, None]).sum(axis=-2)
            if du is not None:
                du[:, t] = (dh * delta.data[:, t, :, None] * B.data[:, t, None, :]).sum(axis=-1)
            dh = dh * dA[:, t]
        if du is not None:
            u._accumulate(du)
        if ddelta is not None:
            delta._accumulate(ddelta)
        if dAp is not None:
            A._accumulate(dAp)
        if dB is not None:
            B._accumulate(dB)
        if dC is not None:
            C._accumulate(dC)

    out = _node(y, (u, delta, A, B, C), backward)
    return out


# ------------------------------------------------------------------ utilities


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def finite_diff_gradient(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to every coordinate of x.

    Raises if any probe produces a non-finite value, naming the coordinate.
    """
    base = x.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x).data)
        flat[i] = orig - eps
        down = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            idx = np.unravel_index(i, base.shape)
            raise ValueError(f"finite_diff_gradient: non-finite probe at coordinate {idx}")
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def gradient_agreement(analytic: np.ndarray, numeric: np.ndarray, tiny: float = 1e-6):
    """(max relative error over significant coords, max absolute error over tiny coords).

    A coordinate is significant when either gradient exceeds `tiny` in magnitude;
    relative error there is |a - n| / max(|a|, |n|).
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mag = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    sig = mag > tiny
    rel = float((diff[sig] / mag[sig]).max()) if sig.any() else 0.0
    abs_tiny = float(diff[~sig].max()) if (~sig).any() else 0.0
    return rel, abs_tiny
