"""Training: decoupled-weight-decay Adam, warmup/decay schedule, class-weighted
sampling and loss, infill (FIM) augmentation, embedding-space adversarial
regularization, and the pretrain/fine-tune loops.

Loops write an append-only JSONL log (header record with seed + full config,
then one record per optimizer step and one per epoch) and a checkpoint per
epoch. A non-finite loss aborts immediately, naming the step.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time

import numpy as np

from .autodiff import Tensor, log_softmax, no_grad, softmax_rows
from .data import FIM_MID_ID, FIM_PRE_ID, FIM_SUF_ID, PAD_ID, ByteTokenizer, LabeledSample
from .model import Model, save_checkpoint

__all__ = [
    "OptimizerConfig",
    "FimConfig",
    "SiftConfig",
    "ClassWeights",
    "AdamW",
    "warmup_linear_decay",
    "class_weights",
    "WeightedBatchSampler",
    "weighted_cross_entropy",
    "lm_cross_entropy",
    "fim_transform",
    "sift_adversarial_loss",
    "pretrain",
    "finetune",
    "evaluate_classifier",
    "TrainResult",
]


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1.41e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01  # skipped for biases and layer-norm parameters
    warmup_ratio: float = 0.15
    batch_size: int = 16
    epochs: int = 10
    moe_aux_weight: float = 0.01

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("rates and sizes must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must be in [0, 1]")


FINETUNE_DEFAULTS = OptimizerConfig(lr=5e-6, batch_size=4)


@dataclasses.dataclass(frozen=True)
class FimConfig:
    fim_rate: float = 0.5
    spm_rate: float = 0.5
    pre_id: int = FIM_PRE_ID
    mid_id: int = FIM_MID_ID
    suf_id: int = FIM_SUF_ID

    def __post_init__(self):
        if not (0.0 <= self.fim_rate <= 1.0 and 0.0 <= self.spm_rate <= 1.0):
            raise ValueError("rates must be in [0, 1]")


@dataclasses.dataclass(frozen=True)
class SiftConfig:
    lr: float = 1e-4
    init_magnitude: float = 1e-2
    weight: float = 1.0  # adversarial term weight; unstated upstream, exposed as config
    ascent_steps: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.init_magnitude < 0 or self.ascent_steps < 0:
            raise ValueError("sift rates must be positive")


# ------------------------------------------------------------------- optimizer


class AdamW:
    """Decoupled weight decay Adam. Decay is applied only to parameters whose
    decay tag is True; biases and norm gains/shifts are tagged False at init."""

    def __init__(self, params: dict, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1**self.t
        b2t = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            if p.decay and cfg.weight_decay > 0.0:
                p.data -= lr * cfg.weight_decay * p.data
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def warmup_linear_decay(step: int, total_steps: int, warmup_ratio: float, peak: float) -> float:
    """0 at step 0, peak exactly at ceil(warmup_ratio * total_steps), then linear to 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak if step == warmup else 0.0
    return peak * max(0, total_steps - step) / (total_steps - warmup)


# ------------------------------------------------------------- class weighting


@dataclasses.dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray  # [2], w_c = N / (2 * N_c)
    counts: np.ndarray
    total: int


def class_weights(counts) -> ClassWeights:
    c = np.asarray(counts, dtype=np.int64)
    if c.shape != (2,):
        raise ValueError("expected exactly two class counts")
    if np.any(c <= 0):
        raise ValueError("every class needs at least one sample")
    total = int(c.sum())
    return ClassWeights(weights=total / (2.0 * c), counts=c, total=total)


class WeightedBatchSampler:
    """Draws index batches with replacement, p(i) proportional to the weight of
    sample i's class. Deterministic under a fixed seed."""

    def __init__(self, labels, weights: ClassWeights, batch_size: int, seed: int):
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.size == 0:
            raise ValueError("empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
        per_sample = w[self.labels]
        self._p = per_sample / per_sample.sum()
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)

    def take(self, n_batches: int) -> list[np.ndarray]:
        return [
            self._rng.choice(self.labels.size, size=self.batch_size, replace=True, p=self._p)
            for _ in range(n_batches)
        ]


# ----------------------------------------------------------------------- loss


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """Mean over the batch of w_label * (-log softmax(logits)[label])."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[-1] != 2:
        raise ValueError(f"expected [batch, 2] logits, got {logits.shape}")
    if y.shape != (logits.shape[0],) or np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1, one per row")
    w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    picked = log_softmax(logits)[np.arange(y.size), y]
    return -(picked * Tensor(w[y].astype(logits.data.dtype))).sum() * (1.0 / y.size)


def lm_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Next-token cross entropy averaged over unmasked positions."""
    b, t, _ = logits.shape
    if targets.shape != (b, t) or mask.shape != (b, t):
        raise ValueError("targets/mask must match logits leading shape")
    if mask.sum() == 0:
        raise ValueError("mask excludes every position")
    lp = log_softmax(logits)
    picked = lp[np.arange(b)[:, None], np.arange(t)[None, :], targets]
    m = mask.astype(logits.data.dtype)
    return -(picked * Tensor(m)).sum() * (1.0 / m.sum())


# ------------------------------------------------------------------------ FIM


def fim_transform(tokens: np.ndarray, cfg: FimConfig, rng: np.random.Generator) -> np.ndarray:
    """Infill augmentation. With probability fim_rate, split into
    prefix/middle/suffix (middle never empty) and emit either

        PSM: <pre> prefix <suf> suffix <mid> middle
        SPM: <pre> <suf> suffix <mid> prefix middle   (probability spm_rate)

    otherwise return the sequence unchanged. Sequences shorter than 3 tokens
    pass through untouched.
    """
    t = np.asarray(tokens, dtype=np.int64)
    n = t.size
    if n < 3:
        return t.copy()
    if rng.random() >= cfg.fim_rate:
        return t.copy()
    a = int(rng.integers(0, n))
    b = int(rng.integers(a + 1, n + 1))
    prefix, middle, suffix = t[:a], t[a:b], t[b:]
    pre = np.array([cfg.pre_id], dtype=np.int64)
    mid = np.array([cfg.mid_id], dtype=np.int64)
    suf = np.array([cfg.suf_id], dtype=np.int64)
    if rng.random() < cfg.spm_rate:
        return np.concatenate([pre, suf, suffix, mid, prefix, middle])
    return np.concatenate([pre, prefix, suf, suffix, mid, middle])


# ----------------------------------------------------------------------- SIFT


def _symmetric_kl(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Mean over rows of KL(a||b) + KL(b||a), from logits."""
    pa, pb = softmax_rows(logits_a), softmax_rows(logits_b)
    la, lb = log_softmax(logits_a), log_softmax(logits_b)
    per_row = ((pa - pb) * (la - lb)).sum(axis=-1)
    return per_row.mean()


def sift_adversarial_loss(
    model: Model,
    embeddings: Tensor,
    cfg: SiftConfig,
    rng: np.random.Generator,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    """Adversarial smoothness term: maximize clean-vs-perturbed divergence over a
    small perturbation of the input embeddings, then return that divergence with
    gradients flowing into the model.

    Both divergence passes run without dropout so a zero perturbation gives an
    exact zero. The perturbation has its own ascent optimizer (plain sign-free
    gradient ascent, lr from config) and never touches model parameters.
    """
    clean = model.forward_embedded(embeddings, mode="classify", pad_mask=pad_mask, train=False).logits
    clean_const = Tensor(clean.data.copy())

    delta = Tensor(
        (rng.uniform(-cfg.init_magnitude, cfg.init_magnitude, size=embeddings.shape)).astype(embeddings.data.dtype),
        requires_grad=True,
    )
    emb_const = Tensor(embeddings.data)
    for _ in range(cfg.ascent_steps):
        adv_logits = model.forward_embedded(emb_const + delta, mode="classify", pad_mask=pad_mask, train=False).logits
        div = _symmetric_kl(clean_const, adv_logits)
        delta.grad = None
        div.backward()
        if delta.grad is None:
            break
        delta = Tensor(
            (delta.data + cfg.lr * delta.grad).astype(embeddings.data.dtype), requires_grad=True
        )
    if cfg.ascent_steps > 0:
        # the ascent backward also wrote gradients into model parameters;
        # clear them so the caller's backward starts from a clean slate
        for p in model.params.values():
            p.grad = None

    perturbed = model.forward_embedded(
        embeddings + Tensor(delta.data), mode="classify", pad_mask=pad_mask, train=False
    ).logits
    return _symmetric_kl(clean, perturbed)


# ------------------------------------------------------------------ the loops


@dataclasses.dataclass
class TrainResult:
    epochs: list          # one summary dict per epoch
    log_path: str
    checkpoint_paths: list
    model: Model


def _pad_batch(seqs: list[np.ndarray], pad_id: int = PAD_ID):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _check_finite(value: float, step: int):
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite loss ({value}) at step {step}; aborting")


def _log_open(out_dir: str, name: str, header: dict):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}.log.jsonl")
    fh = open(path, "a", encoding="utf-8")
    fh.write(json.dumps({"event": "header", **header}, sort_keys=True) + "\n")
    fh.flush()
    return fh, path


def _config_echo(model: Model, opt: OptimizerConfig, extra: dict) -> dict:
    return {
        "model": dataclasses.asdict(model.config),
        "optimizer": dataclasses.asdict(opt),
        **extra,
    }


def pretrain(
    model: Model,
    texts: list[str],
    opt_cfg: OptimizerConfig | None = None,
    fim_cfg: FimConfig | None = None,
    seed: int = 0,
    out_dir: str = "runs/pretrain",
    max_tokens: int = 1024,
    checkpoint_every_epoch: bool = True,
) -> TrainResult:
    """Causal LM pretraining with infill augmentation over raw code strings."""
    opt_cfg = opt_cfg or OptimizerConfig()
    fim_cfg = fim_cfg or FimConfig()
    tok = ByteTokenizer()
    seqs = [tok.encode(t, add_bos=True, add_eos=True)[: max_tokens + 1] for t in texts]
    if not seqs:
        raise ValueError("empty pretraining corpus")

    master = np.random.default_rng(seed)
    rng_order, rng_fim = master.spawn(2)
    opt = AdamW(model.params, opt_cfg)
    steps_per_epoch = math.ceil(len(seqs) / opt_cfg.batch_size)
    total_steps = steps_per_epoch * opt_cfg.epochs

    fh, log_path = _log_open(out_dir, "pretrain", {"seed": seed, "objective": "clm+fim",
                                                   **_config_echo(model, opt_cfg, {"fim": dataclasses.asdict(fim_cfg)})})
    epochs, ckpts = [], []
    step = 0
    try:
        for epoch in range(opt_cfg.epochs):
            order = rng_order.permutation(len(seqs))
            losses = []
            for lo in range(0, len(seqs), opt_cfg.batch_size):
                batch_ids = [fim_transform(seqs[i], fim_cfg, rng_fim)[: max_tokens + 1] for i in order[lo : lo + opt_cfg.batch_size]]
                padded = _pad_batch(batch_ids)
                inputs, targets = padded[:, :-1], padded[:, 1:]
                mask = targets != PAD_ID
                lr = warmup_linear_decay(step, total_steps, opt_cfg.warmup_ratio, opt_cfg.lr)
                out = model.forward(inputs, mode="lm")
                loss = lm_cross_entropy(out.logits, targets, mask)
                if out.moe_aux is not None and opt_cfg.moe_aux_weight > 0:
                    loss = loss + out.moe_aux * opt_cfg.moe_aux_weight
                val = loss.item()
                _check_finite(val, step)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                fh.write(json.dumps({"event": "step", "step": step, "lr": lr, "loss": val}) + "\n")
                losses.append(val)
                step += 1
            record = {"event": "epoch", "epoch": epoch, "mean_loss": float(np.mean(losses))}
            if checkpoint_every_epoch:
                ck = os.path.join(out_dir, f"pretrain_epoch_{epoch}.npz")
                save_checkpoint(model, ck)
                ckpts.append(ck)
                record["checkpoint"] = ck
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            epochs.append(record)
    finally:
        fh.close()
    return TrainResult(epochs=epochs, log_path=log_path, checkpoint_paths=ckpts, model=model)


def _encode_labeled(samples: list[LabeledSample], max_tokens: int):
    tok = ByteTokenizer()
    seqs = [tok.encode(s.code)[:max_tokens] for s in samples]
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return seqs, labels


def finetune(
    model: Model,
    train_samples: list[LabeledSample],
    val_samples: list[LabeledSample] | None = None,
    opt_cfg: OptimizerConfig | None = None,
    sift_cfg: SiftConfig | None = None,
    seed: int = 0,
    out_dir: str = "runs/finetune",
    max_tokens: int = 1024,
    memory_enabled: bool = True,
    checkpoint_every_epoch: bool = True,
) -> TrainResult:
    """Class-weighted classification fine-tuning, optionally with the
    adversarial smoothness term. memory_enabled=False trains and evaluates the
    gate-ablated variant (attention memory path off)."""
    opt_cfg = opt_cfg or FINETUNE_DEFAULTS
    seqs, labels = _encode_labeled(train_samples, max_tokens)
    counts = np.bincount(labels, minlength=2)
    cw = class_weights(counts)
    master = np.random.default_rng(seed)
    rng_sampler_seed = int(master.integers(2**31))
    rng_dropout, rng_sift = master.spawn(2)
    sampler = WeightedBatchSampler(labels, cw, opt_cfg.batch_size, rng_sampler_seed)
    opt = AdamW(model.params, opt_cfg)
    steps_per_epoch = math.ceil(len(seqs) / opt_cfg.batch_size)
    total_steps = steps_per_epoch * opt_cfg.epochs

    header_extra = {
        "class_counts": counts.tolist(),
        "class_weights": cw.weights.tolist(),
        "sift": dataclasses.asdict(sift_cfg) if sift_cfg else None,
        "memory_enabled": memory_enabled,
    }
    fh, log_path = _log_open(out_dir, "finetune", {"seed": seed, "objective": "classify",
                                                   **_config_echo(model, opt_cfg, header_extra)})
    epochs, ckpts = [], []
    step = 0
    t0 = time.time()
    try:
        for epoch in range(opt_cfg.epochs):
            losses = []
            for batch in sampler.take(steps_per_epoch):
                padded = _pad_batch([seqs[i] for i in batch])
                y = labels[batch]
                lr = warmup_linear_decay(step, total_steps, opt_cfg.warmup_ratio, opt_cfg.lr)
                pad_mask = padded != PAD_ID
                emb = model.embed(padded)
                out = model.forward_embedded(emb, mode="classify", pad_mask=pad_mask,
                                             train=True, rng=rng_dropout, memory_enabled=memory_enabled)
                loss = weighted_cross_entropy(out.logits, y, cw)
                parts = {"task_loss": loss.item()}
                if sift_cfg is not None:
                    adv = sift_adversarial_loss(model, emb, sift_cfg, rng_sift, pad_mask)
                    parts["adv_loss"] = adv.item()
                    loss = loss + adv * sift_cfg.weight
                if out.moe_aux is not None and opt_cfg.moe_aux_weight > 0:
                    loss = loss + out.moe_aux * opt_cfg.moe_aux_weight
                val = loss.item()
                _check_finite(val, step)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                fh.write(json.dumps({"event": "step", "step": step, "lr": lr, "loss": val, **parts}) + "\n")
                losses.append(val)
                step += 1
            record = {"event": "epoch", "epoch": epoch, "mean_loss": float(np.mean(losses)),
                      "elapsed_s": round(time.time() - t0, 3)}
            if val_samples:
                scores, val_labels = evaluate_classifier(model, val_samples, max_tokens=max_tokens,
                                                         memory_enabled=memory_enabled)
                preds = (scores >= 0.5).astype(np.int64)
                from .metrics import basic_metrics, confusion_from_predictions

                record["val"] = dataclasses.asdict(basic_metrics(confusion_from_predictions(val_labels, preds)))
            if checkpoint_every_epoch:
                ck = os.path.join(out_dir, f"finetune_epoch_{epoch}.npz")
                save_checkpoint(model, ck)
                ckpts.append(ck)
                record["checkpoint"] = ck
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            epochs.append(record)
    finally:
        fh.close()
    return TrainResult(epochs=epochs, log_path=log_path, checkpoint_paths=ckpts, model=model)


def evaluate_classifier(
    model: Model,
    samples: list[LabeledSample],
    max_tokens: int = 1024,
    batch_size: int = 8,
    memory_enabled: bool = True,
):
    """Positive-class probabilities and labels, in sample order."""
    seqs, labels = _encode_labeled(samples, max_tokens)
    order = np.argsort([len(s) for s in seqs], kind="stable")  # batch similar lengths
    scores = np.zeros(len(seqs), dtype=np.float64)
    with no_grad():
        for lo in range(0, len(seqs), batch_size):
            idx = order[lo : lo + batch_size]
            padded = _pad_batch([seqs[i] for i in idx])
            out = model.forward(padded, mode="classify", memory_enabled=memory_enabled)
            probs = softmax_rows(out.logits).data
            scores[idx] = probs[:, 1]
    return scores, labels
