"""Flat run configuration: one typed key-value document (JSON) covering every
component. Unknown keys are rejected, command-line flags override file values,
and the effective configuration is echoed so every run is reproducible from
its log alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing

from .model import ModelConfig
from .training import FimConfig, OptimizerConfig, SiftConfig

__all__ = ["RunConfig", "load_run_config", "merge_overrides", "resolve_out_dir"]


@dataclasses.dataclass(frozen=True)
class RunConfig:
    # run plumbing
    seed: int = 0
    out_dir: str | None = None    # None: $VULNLM_OUT_DIR if set, else "runs"
    max_tokens: int = 1024        # sequences truncated to this many tokens
    memory_enabled: bool = True   # False ablates the attention memory path

    # model
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
    dropout: float = 0.1
    max_len: int = 128000

    # optimizer; these defaults suit pretraining, and the finetune command
    # lowers lr/batch_size to 5e-6/4 when the user has not set them
    lr: float = 1.41e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.15
    batch_size: int = 16
    epochs: int = 10
    moe_aux_weight: float = 0.01

    # infill augmentation (pretraining)
    fim_rate: float = 0.5
    spm_rate: float = 0.5

    # adversarial smoothness term (fine-tuning)
    sift_enabled: bool = False
    sift_lr: float = 1e-4
    sift_magnitude: float = 1e-2
    sift_weight: float = 1.0
    sift_ascent_steps: int = 1

    # ------------------------------------------------------------- builders

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            vocab_size=self.vocab_size,
            n_heads=self.n_heads,
            segment_length=self.segment_length,
            attention_offset=self.attention_offset,
            attention_period=self.attention_period,
            d_state=self.d_state,
            d_conv=self.d_conv,
            expand=self.expand,
            n_experts=self.n_experts,
            k_active=self.k_active,
            expert_hidden_mult=self.expert_hidden_mult,
            dropout=self.dropout,
            max_len=self.max_len,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            weight_decay=self.weight_decay,
            warmup_ratio=self.warmup_ratio,
            batch_size=self.batch_size,
            epochs=self.epochs,
            moe_aux_weight=self.moe_aux_weight,
        )

    def fim_config(self) -> FimConfig:
        return FimConfig(fim_rate=self.fim_rate, spm_rate=self.spm_rate)

    def sift_config(self) -> SiftConfig | None:
        if not self.sift_enabled:
            return None
        return SiftConfig(
            lr=self.sift_lr,
            init_magnitude=self.sift_magnitude,
            weight=self.sift_weight,
            ascent_steps=self.sift_ascent_steps,
        )

    def validate(self) -> "RunConfig":
        """Build every sub-config so their range checks run."""
        self.model_config()
        self.optimizer_config()
        self.fim_config()
        SiftConfig(lr=self.sift_lr, init_magnitude=self.sift_magnitude,
                   weight=self.sift_weight, ascent_steps=self.sift_ascent_steps)
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.max_tokens > self.max_len:
            raise ValueError("max_tokens cannot exceed the model's max_len")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = typing.get_type_hints(RunConfig)


def _check_type(key: str, value):
    hint = _HINTS[key]
    if hint is bool:
        if not isinstance(value, bool):
            raise ValueError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    # str | None (out_dir)
    if value is not None and not isinstance(value, str):
        raise ValueError(f"config key {key!r} must be a string or null, got {value!r}")
    return value


def _from_mapping(raw: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {k: _check_type(k, v) for k, v in raw.items()}
    return RunConfig(**coerced).validate()


def load_run_config(path: str) -> tuple[RunConfig, set]:
    """Parse a JSON config file. Returns (config, keys the file set) so
    callers can tell explicit values from defaults."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return _from_mapping(raw), set(raw)


def merge_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Layer explicit overrides (CLI flags) over a config, revalidating."""
    if not overrides:
        return cfg
    merged = cfg.to_dict()
    merged.update(overrides)
    return _from_mapping(merged)


def resolve_out_dir(cfg: RunConfig) -> str:
    if cfg.out_dir:
        return cfg.out_dir
    return os.environ.get("VULNLM_OUT_DIR") or "runs"
