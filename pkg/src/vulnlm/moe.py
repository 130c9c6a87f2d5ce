"""Sparse mixture-of-experts feed-forward layer: top-2 of 8 experts per token.

Routing picks the two highest router logits (ties toward the lower expert
index), normalizes just those two with a softmax, and combines the two expert
outputs. Per-invocation counters record how many tokens touched each expert,
which is what the sparsity assertions check. A Switch-style load-balance
penalty (mean routed fraction x mean router probability, per expert) is
returned with the stats; training decides its weight, oracle tests ignore it.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import Tensor, gelu, scatter_rows, softmax_rows

__all__ = ["MoeConfig", "MoeStats", "init_moe_params", "route", "moe_forward"]


@dataclasses.dataclass(frozen=True)
class MoeConfig:
    d_model: int
    n_experts: int = 8
    k_active: int = 2
    hidden_mult: int = 4

    def __post_init__(self):
        if self.k_active > self.n_experts:
            raise ValueError("k_active must be <= n_experts")
        if self.k_active < 1:
            raise ValueError("k_active must be >= 1")

    @property
    def d_hidden(self) -> int:
        return self.hidden_mult * self.d_model


@dataclasses.dataclass
class MoeStats:
    expert_token_counts: np.ndarray  # [n_experts] tokens routed to each expert
    aux_loss: Tensor                 # scalar load-balance penalty
    indices: np.ndarray              # [n_tokens, k_active] chosen experts per token


def _param(data: np.ndarray, name: str, decay: bool = True) -> Tensor:
    t = Tensor(data, requires_grad=True, name=name)
    t.decay = decay
    return t


def init_moe_params(cfg: MoeConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = "") -> dict:
    d, e, h = cfg.d_model, cfg.n_experts, cfg.d_hidden

    def normal(shape, scale):
        return (rng.normal(size=shape) * scale).astype(dtype)

    p = prefix
    return {
        p + "router.w": _param(normal((d, e), d**-0.5), p + "router.w"),
        p + "experts.w1": _param(normal((e, d, h), d**-0.5), p + "experts.w1"),
        p + "experts.b1": _param(np.zeros((e, h), dtype=dtype), p + "experts.b1", decay=False),
        p + "experts.w2": _param(normal((e, h, d), h**-0.5), p + "experts.w2"),
        p + "experts.b2": _param(np.zeros((e, d), dtype=dtype), p + "experts.b2", decay=False),
    }


def _top_k_descending(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending, ties toward lower index."""
    # stable sort on -logits: equal logits keep index order
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def route(token, router_w: Tensor, k_active: int = 2):
    """Pick top-k experts for one token; returns (indices, gates summing to 1)."""
    t = token if isinstance(token, Tensor) else Tensor(np.asarray(token))
    if not np.all(np.isfinite(t.data)):
        raise ValueError("route requires finite token features")
    logits = t.reshape((1, t.shape[-1])) @ router_w
    idx = _top_k_descending(logits.data[0], k_active)
    gates = softmax_rows(logits[:, idx])
    return idx, gates.reshape((k_active,))


def moe_forward(x: Tensor, cfg: MoeConfig, params: dict, prefix: str = ""):
    """Apply the MoE layer to x: [batch, T, d_model] or [T, d_model].

    Returns (output with x's shape, MoeStats).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"expected [batch, T, {cfg.d_model}], got {x.shape}")
    bsz, T, d = x.shape
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    p = prefix
    n_tok = bsz * T
    flat = x.reshape((n_tok, d))

    logits = flat @ params[p + "router.w"]                     # [n_tok, E]
    idx = _top_k_descending(logits.data, cfg.k_active)         # [n_tok, k]
    sel = logits[np.arange(n_tok)[:, None], idx]
    gates = softmax_rows(sel)                                  # [n_tok, k]

    counts = np.zeros(cfg.n_experts, dtype=np.int64)
    out = None
    for e in range(cfg.n_experts):
        rows, slots = np.nonzero(idx == e)
        counts[e] = rows.size
        if rows.size == 0:
            continue
        xe = flat[rows]
        he = gelu(xe @ params[p + "experts.w1"][e] + params[p + "experts.b1"][e])
        oe = he @ params[p + "experts.w2"][e] + params[p + "experts.b2"][e]
        weighted = oe * gates[rows, slots].reshape((rows.size, 1))
        piece = scatter_rows(weighted, rows, n_tok)
        out = piece if out is None else out + piece

    # load balance: n_experts * sum_e (routed fraction_e * mean router prob_e)
    frac = Tensor((counts / (n_tok * cfg.k_active)).astype(logits.data.dtype))
    mean_prob = softmax_rows(logits).mean(axis=0)
    aux = (frac * mean_prob).sum() * float(cfg.n_experts)

    out = out.reshape((bsz, T, d))
    if squeeze:
        out = out.reshape((T, d))
    return out, MoeStats(expert_token_counts=counts, aux_loss=aux, indices=idx)
