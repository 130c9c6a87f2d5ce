"""Segmented linear attention with a compressive memory path.

The sequence is processed in fixed-length segments. Within a segment,
standard causal dot attention; across segments, an additive key-value
memory (M, z) queried through the elu_plus_one feature map. A learned
per-head gate sigmoid(beta) mixes the two paths. Peak transient cost is
O(L*T + d_head^2) per head; the T x T score matrix never materializes.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import Tensor, concat, elu_plus_one, sigmoid, softmax_rows, swap_last, transpose

__all__ = [
    "AttentionConfig",
    "CompressiveMemoryState",
    "init_attention_params",
    "segment_dot_attention",
    "memory_retrieve",
    "memory_update",
    "attention_forward",
]

_MASK_VALUE = -1e30  # finite so softmax_rows' input check holds


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 8
    segment_length: int = 256
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclasses.dataclass
class CompressiveMemoryState:
    """Additive memory: M accumulates sigma(K)^T V, z accumulates row sums of sigma(K).

    Leading dimensions are free (per-head, per-batch); trailing shapes are
    M [..., d_head, d_head] and z [..., d_head].
    """

    M: Tensor
    z: Tensor

    @staticmethod
    def zeros(lead: tuple, d_head: int, dtype=np.float64) -> "CompressiveMemoryState":
        return CompressiveMemoryState(
            M=Tensor(np.zeros(lead + (d_head, d_head), dtype=dtype)),
            z=Tensor(np.zeros(lead + (d_head,), dtype=dtype)),
        )


def _param(data: np.ndarray, name: str, decay: bool = True) -> Tensor:
    t = Tensor(data, requires_grad=True, name=name)
    t.decay = decay
    return t


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = "") -> dict:
    d = cfg.d_model

    def normal(shape):
        return (rng.normal(size=shape) * d**-0.5).astype(dtype)

    p = prefix
    return {
        p + "wq.w": _param(normal((d, d)), p + "wq.w"),
        p + "wk.w": _param(normal((d, d)), p + "wk.w"),
        p + "wv.w": _param(normal((d, d)), p + "wv.w"),
        p + "wo.w": _param(normal((d, d)), p + "wo.w"),
        p + "beta": _param(np.zeros(cfg.n_heads, dtype=dtype), p + "beta"),
    }


def segment_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Causal scaled dot attention inside one segment.

    q, k, v: [..., L, d_head]; row t attends to rows <= t.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"mismatched shapes {q.shape}, {k.shape}, {v.shape}")
    L, d = q.shape[-2], q.shape[-1]
    scores = (q @ swap_last(k)) * (1.0 / np.sqrt(d))
    mask = np.triu(np.full((L, L), _MASK_VALUE, dtype=q.data.dtype), k=1)
    weights = softmax_rows(scores + Tensor(mask))
    return weights @ v


def memory_retrieve(q: Tensor, state: CompressiveMemoryState, epsilon: float = 1e-6) -> Tensor:
    """sigma(Q) M / (sigma(Q) z + epsilon), rows independent; zeros from a zero state."""
    sq = elu_plus_one(q)
    num = sq @ state.M
    den = sq @ state.z.reshape(state.z.shape + (1,))
    return num * (den + epsilon) ** -1.0


def memory_update(state: CompressiveMemoryState, k: Tensor, v: Tensor) -> CompressiveMemoryState:
    """M += sigma(K)^T V; z += sum of sigma(K) rows. Additive, so segment order is irrelevant."""
    if k.shape != v.shape:
        raise ValueError(f"mismatched shapes {k.shape}, {v.shape}")
    if k.shape[-1] != state.z.shape[-1]:
        raise ValueError(f"d_head mismatch: {k.shape[-1]} vs {state.z.shape[-1]}")
    sk = elu_plus_one(k)
    return CompressiveMemoryState(
        M=state.M + swap_last(sk) @ v,
        z=state.z + sk.sum(axis=-2),
    )


def attention_forward(
    x: Tensor,
    cfg: AttentionConfig,
    params: dict,
    prefix: str = "",
    memory_enabled: bool = True,
    return_state: bool = False,
):
    """Full multi-head segmented attention over x: [batch, T, d_model] (or [T, d_model])."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"expected [batch, T, {cfg.d_model}], got {x.shape}")
    bsz, T, d = x.shape
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    H, dh, L = cfg.n_heads, cfg.d_head, cfg.segment_length
    p = prefix

    def heads(t: Tensor) -> Tensor:
        return transpose(t.reshape((bsz, T, H, dh)), (0, 2, 1, 3))  # [b, H, T, dh]

    q = heads(x @ params[p + "wq.w"])
    k = heads(x @ params[p + "wk.w"])
    v = heads(x @ params[p + "wv.w"])

    gate = sigmoid(params[p + "beta"]).reshape((1, H, 1, 1))
    state = CompressiveMemoryState.zeros((bsz, H), dh, dtype=x.data.dtype)

    pieces = []
    for lo in range(0, T, L):
        hi = min(lo + L, T)
        qs = q[:, :, lo:hi, :]
        ks = k[:, :, lo:hi, :]
        vs = v[:, :, lo:hi, :]
        a_dot = segment_dot_attention(qs, ks, vs)
        if memory_enabled:
            a_mem = memory_retrieve(qs, state, cfg.epsilon)
            state = memory_update(state, ks, vs)
            pieces.append(gate * a_mem + (1.0 - gate) * a_dot)
        else:
            pieces.append(a_dot)
    merged = pieces[0] if len(pieces) == 1 else concat(pieces, axis=2)
    out = transpose(merged, (0, 2, 1, 3)).reshape((bsz, T, d)) @ params[p + "wo.w"]
    if squeeze:
        out = out.reshape((T, d))
    return (out, state) if return_state else out
