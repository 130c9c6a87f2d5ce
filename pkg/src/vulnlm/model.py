"""Model assembly: layer schedule, residual trunk, heads, checkpoints.

Layer kinds by index i: attention when i >= offset and (i - offset) % period
== 0 (checked first), else MoE on odd i, else Mamba. Every layer output is
added back to the residual stream; a final LayerNorm closes the trunk. The
LM head reuses the embedding transpose; the classification head is a two
layer GELU MLP with LayerNorm and dropout, fed by mean pooling over
non-padding positions.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import attention as attn
from . import moe as moe_mod
from . import ssm
from .autodiff import Tensor, dropout, gelu, layer_norm, swap_last

__all__ = [
    "ModelConfig",
    "ModelOutput",
    "Model",
    "build_schedule",
    "init_model",
    "classification_head",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "vulnlm-checkpoint"
CHECKPOINT_VERSION = 1

MAMBA, MOE, ATTENTION = "mamba", "moe", "attention"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 12
    vocab_size: int = 262
    n_heads: int = 8
    segment_length: int = 256
    attention_offset: int = 2
    attention_period: int = 8
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    n_experts: int = 8
    k_active: int = 2
    expert_hidden_mult: int = 4
    epsilon: float = 1e-6
    dropout: float = 0.1
    max_len: int = 128_000
    pad_id: int | None = 256

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.attention_offset < 0 or self.attention_period < 1:
            raise ValueError("attention_offset must be >= 0 and attention_period >= 1")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even (classifier hidden width is d_model / 2)")

    @property
    def mamba(self) -> ssm.MambaConfig:
        return ssm.MambaConfig(self.d_model, self.d_state, self.d_conv, self.expand)

    @property
    def attention(self) -> attn.AttentionConfig:
        return attn.AttentionConfig(self.d_model, self.n_heads, self.segment_length, self.epsilon)

    @property
    def moe(self) -> moe_mod.MoeConfig:
        return moe_mod.MoeConfig(self.d_model, self.n_experts, self.k_active, self.expert_hidden_mult)


def build_schedule(n_layers: int, offset: int = 2, period: int = 8) -> list[str]:
    """Layer kind per index; the attention branch takes precedence."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    kinds = []
    for i in range(n_layers):
        if i >= offset and (i - offset) % period == 0:
            kinds.append(ATTENTION)
        elif i % 2 == 1:
            kinds.append(MOE)
        else:
            kinds.append(MAMBA)
    return kinds


@dataclasses.dataclass
class ModelOutput:
    logits: Tensor
    moe_aux: Tensor | None          # mean load-balance penalty across MoE layers
    moe_counts: list[np.ndarray]    # per-MoE-layer expert token counters


def _param(data: np.ndarray, name: str, decay: bool = True) -> Tensor:
    t = Tensor(data, requires_grad=True, name=name)
    t.decay = decay
    return t


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
    rng = np.random.default_rng(seed)
    d = config.d_model
    params: dict[str, Tensor] = {}
    params["embed.table"] = _param((rng.normal(size=(config.vocab_size, d)) * d**-0.5).astype(dtype), "embed.table")

    schedule = build_schedule(config.n_layers, config.attention_offset, config.attention_period)
    for i, kind in enumerate(schedule):
        prefix = f"layers.{i}."
        if kind == MAMBA:
            params.update(ssm.init_mamba_params(config.mamba, rng, dtype, prefix))
        elif kind == ATTENTION:
            params.update(attn.init_attention_params(config.attention, rng, dtype, prefix))
        else:
            params.update(moe_mod.init_moe_params(config.moe, rng, dtype, prefix))

    params["final_norm.g"] = _param(np.ones(d, dtype=dtype), "final_norm.g", decay=False)
    params["final_norm.b"] = _param(np.zeros(d, dtype=dtype), "final_norm.b", decay=False)

    half = d // 2

    def normal(shape, scale):
        return (rng.normal(size=shape) * scale).astype(dtype)

    params["head.w1"] = _param(normal((d, d), d**-0.5), "head.w1")
    params["head.b1"] = _param(np.zeros(d, dtype=dtype), "head.b1", decay=False)
    params["head.w2"] = _param(normal((d, half), d**-0.5), "head.w2")
    params["head.b2"] = _param(np.zeros(half, dtype=dtype), "head.b2", decay=False)
    params["head.ln.g"] = _param(np.ones(half, dtype=dtype), "head.ln.g", decay=False)
    params["head.ln.b"] = _param(np.zeros(half, dtype=dtype), "head.ln.b", decay=False)
    params["head.w3"] = _param(normal((half, 2), half**-0.5), "head.w3")
    params["head.b3"] = _param(np.zeros(2, dtype=dtype), "head.b3", decay=False)
    return Model(config, params, schedule)


def classification_head(h: Tensor, params: dict, dropout_rate: float = 0.0, train: bool = False, rng=None) -> Tensor:
    """Appendix-style MLP head: two GELU layers with dropout, LayerNorm, linear to 2 logits."""
    if h.shape[-1] != params["head.w1"].shape[0]:
        raise ValueError(f"head expects width {params['head.w1'].shape[0]}, got {h.shape[-1]}")
    rate = dropout_rate if train else 0.0
    if rate > 0.0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    x1 = gelu(h @ params["head.w1"] + params["head.b1"])
    x1 = dropout(x1, rate, rng) if rate > 0 else x1
    x2 = gelu(x1 @ params["head.w2"] + params["head.b2"])
    x2 = dropout(x2, rate, rng) if rate > 0 else x2
    x3 = layer_norm(x2, params["head.ln.g"], params["head.ln.b"])
    return x3 @ params["head.w3"] + params["head.b3"]


class Model:
    """Parameter container plus the forward pass. Pure function of (input, params)."""

    def __init__(self, config: ModelConfig, params: dict, schedule: list[str] | None = None):
        self.config = config
        self.params = params
        self.schedule = schedule or build_schedule(config.n_layers, config.attention_offset, config.attention_period)

    def parameters(self) -> dict:
        return self.params

    def embed(self, tokens: np.ndarray) -> Tensor:
        return self.params["embed.table"][tokens]

    def _validate_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError(f"tokens must be [T] or [batch, T], got shape {ids.shape}")
        if ids.shape[1] < 1:
            raise ValueError("sequence length must be >= 1")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max {self.config.max_len}")
        if ids.dtype.kind not in "iu":
            raise ValueError("token ids must be integers")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return ids

    def forward(
        self,
        tokens,
        mode: str = "lm",
        train: bool = False,
        rng=None,
        memory_enabled: bool = True,
    ) -> ModelOutput:
        squeeze = np.asarray(tokens).ndim == 1
        ids = self._validate_tokens(tokens)
        pad_mask = None
        if self.config.pad_id is not None:
            pad_mask = ids != self.config.pad_id
        out = self.forward_embedded(self.embed(ids), mode, pad_mask=pad_mask, train=train, rng=rng, memory_enabled=memory_enabled)
        if squeeze:
            out.logits = out.logits.reshape(out.logits.shape[1:])
        return out

    def forward_embedded(
        self,
        h: Tensor,
        mode: str = "lm",
        pad_mask: np.ndarray | None = None,
        train: bool = False,
        rng=None,
        memory_enabled: bool = True,
    ) -> ModelOutput:
        """Trunk over pre-computed embeddings [batch, T, d_model] (SIFT perturbs here)."""
        if mode not in ("lm", "classify"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg = self.config
        aux_terms = []
        counts = []
        for i, kind in enumerate(self.schedule):
            prefix = f"layers.{i}."
            if kind == MAMBA:
                delta = ssm.mamba_forward(h, cfg.mamba, self.params, prefix)
            elif kind == ATTENTION:
                delta = attn.attention_forward(h, cfg.attention, self.params, prefix, memory_enabled=memory_enabled)
            else:
                delta, stats = moe_mod.moe_forward(h, cfg.moe, self.params, prefix)
                aux_terms.append(stats.aux_loss)
                counts.append(stats.expert_token_counts)
            h = delta + h
        y = layer_norm(h, self.params["final_norm.g"], self.params["final_norm.b"])

        if mode == "lm":
            logits = y @ swap_last(self.params["embed.table"])
        else:
            if pad_mask is None:
                pooled = y.mean(axis=1)
            else:
                m = pad_mask.astype(y.data.dtype)
                denom = m.sum(axis=1)
                if np.any(denom == 0):
                    raise ValueError("classify mode needs at least one non-padding position per sample")
                pooled = (y * Tensor(m[:, :, None])).sum(axis=1) * Tensor((1.0 / denom)[:, None])
            logits = classification_head(pooled, self.params, cfg.dropout, train=train, rng=rng)

        aux = None
        if aux_terms:
            total = aux_terms[0]
            for t in aux_terms[1:]:
                total = total + t
            aux = total * (1.0 / len(aux_terms))
        return ModelOutput(logits=logits, moe_aux=aux, moe_counts=counts)


def count_parameters(model_or_config) -> int:
    if isinstance(model_or_config, Model):
        return int(sum(p.data.size for p in model_or_config.params.values()))
    return int(sum(np.prod(s) for s in _parameter_shapes(model_or_config).values()))


def _parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Shape table without allocating full-scale tensors."""
    d = config.d_model
    shapes: dict[str, tuple] = {"embed.table": (config.vocab_size, d)}
    mc, ac, xc = config.mamba, config.attention, config.moe
    for i, kind in enumerate(build_schedule(config.n_layers, config.attention_offset, config.attention_period)):
        p = f"layers.{i}."
        if kind == MAMBA:
            inner, n, k, r = mc.d_inner, mc.d_state, mc.d_conv, mc.dt_rank
            shapes.update({
                p + "in_proj.w": (d, 2 * inner), p + "conv.w": (inner, k), p + "conv.b": (inner,),
                p + "x_proj.w": (inner, r + 2 * n), p + "dt_proj.w": (r, inner), p + "dt_proj.b": (inner,),
                p + "A_log": (inner, n), p + "D": (inner,), p + "out_proj.w": (inner, d),
            })
        elif kind == ATTENTION:
            shapes.update({p + "wq.w": (d, d), p + "wk.w": (d, d), p + "wv.w": (d, d), p + "wo.w": (d, d), p + "beta": (ac.n_heads,)})
        else:
            e, hh = xc.n_experts, xc.d_hidden
            shapes.update({
                p + "router.w": (d, e), p + "experts.w1": (e, d, hh), p + "experts.b1": (e, hh),
                p + "experts.w2": (e, hh, d), p + "experts.b2": (e, d),
            })
    half = d // 2
    shapes.update({
        "final_norm.g": (d,), "final_norm.b": (d,),
        "head.w1": (d, d), "head.b1": (d,), "head.w2": (d, half), "head.b2": (half,),
        "head.ln.g": (half,), "head.ln.b": (half,), "head.w3": (half, 2), "head.b3": (2,),
    })
    return shapes


# ---------------------------------------------------------------- checkpoints
#
# A checkpoint is a standard npz container (zip of .npy entries): one entry
# per parameter named exactly like the parameter, plus "__meta__", a uint8
# array holding UTF-8 JSON with {format, version, config, decay tags}.


def save_checkpoint(model: Model, path: str) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "decay": {name: bool(p.decay) for name, p in model.params.items()},
    }
    arrays = {name: p.data for name, p in model.params.items()}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __meta__=blob, **arrays)


def load_checkpoint(path: str) -> Model:
    with np.load(path) as f:
        if "__meta__" not in f:
            raise ValueError("not a model checkpoint: missing __meta__ entry")
        meta = json.loads(bytes(f["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["config"])
        params = {}
        for name in f.files:
            if name == "__meta__":
                continue
            t = Tensor(f[name].copy(), requires_grad=True, name=name)
            t.decay = meta["decay"].get(name, True)
            params[name] = t
    expected = set(_parameter_shapes(config))
    if set(params) != expected:
        missing = expected - set(params)
        extra = set(params) - expected
        raise ValueError(f"checkpoint parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    return Model(config, params)
