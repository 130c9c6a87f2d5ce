"""Command-line surface: pretrain, finetune, eval, bench, gen-data, and
inspect-schedule subcommands over the library."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig, load_run_config, merge_overrides, resolve_out_dir
from .data import generate_planted_corpus, ingest_jsonl
from .membench import DEFAULT_BUDGET_BYTES, DEFAULT_LENGTHS, render_bench_table, run_scaling_suite
from .metrics import grouped_report, render_report_text, report_to_json
from .model import build_schedule, init_model, load_checkpoint
from .training import evaluate_classifier, finetune, pretrain

FINETUNE_FALLBACKS = {"lr": 5e-6, "batch_size": 4}


def _effective_config(args, finetune_defaults: bool = False) -> RunConfig:
    if getattr(args, "config", None):
        cfg, set_keys = load_run_config(args.config)
    else:
        cfg, set_keys = RunConfig(), set()
    overrides = {}
    if finetune_defaults:
        for key, value in FINETUNE_FALLBACKS.items():
            if key not in set_keys:
                overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    cfg = merge_overrides(cfg, overrides)
    print("effective config:")
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return cfg


def _ingest(path: str):
    result = ingest_jsonl(path)
    if result.errors:
        print(f"skipped {len(result.errors)} malformed lines in {path}", file=sys.stderr)
    return result.samples


def cmd_pretrain(args) -> int:
    cfg = _effective_config(args)
    samples = _ingest(args.dataset)
    texts = [s.code for s in samples]
    model = init_model(cfg.model_config(), seed=cfg.seed)
    result = pretrain(
        model,
        texts,
        cfg.optimizer_config(),
        cfg.fim_config(),
        seed=cfg.seed,
        out_dir=os.path.join(resolve_out_dir(cfg), "pretrain"),
        max_tokens=cfg.max_tokens,
    )
    print(f"log: {result.log_path}")
    print(f"final checkpoint: {result.checkpoint_paths[-1]}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _effective_config(args, finetune_defaults=True)
    samples = _ingest(args.dataset)
    train_samples = [s for s in samples if s.split == "train"]
    val_samples = [s for s in samples if s.split == "val"]
    if not train_samples:
        raise ValueError("dataset has no train-split records")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        print(f"warm start from {args.checkpoint}")
    else:
        model = init_model(cfg.model_config(), seed=cfg.seed)
    result = finetune(
        model,
        train_samples,
        val_samples or None,
        cfg.optimizer_config(),
        cfg.sift_config(),
        seed=cfg.seed,
        out_dir=os.path.join(resolve_out_dir(cfg), "finetune"),
        max_tokens=cfg.max_tokens,
        memory_enabled=cfg.memory_enabled,
    )
    print(f"log: {result.log_path}")
    print(f"final checkpoint: {result.checkpoint_paths[-1]}")
    last = result.epochs[-1]
    if "val" in last:
        print(f"final val f1: {last['val']['f1']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _effective_config(args)
    model = load_checkpoint(args.checkpoint)
    samples = _ingest(args.dataset)
    scores, _ = evaluate_classifier(
        model, samples, max_tokens=cfg.max_tokens, memory_enabled=cfg.memory_enabled
    )
    preds = (scores >= 0.5).astype(np.int64)
    report = grouped_report(samples, preds, scores=scores, group_by=args.group_by)
    print(render_report_text(report))
    out_dir = resolve_out_dir(cfg)
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))
    print(f"report: {report_path}")
    return 0


def _parse_lengths(text: str) -> list[int]:
    lengths = [int(part) for part in text.split(",") if part.strip()]
    if not lengths:
        raise ValueError("expected a comma-separated list of lengths")
    return lengths


def cmd_bench(args) -> int:
    lengths = _parse_lengths(args.lengths) if args.lengths else list(DEFAULT_LENGTHS)
    budget = args.budget_bytes if args.budget_bytes is not None else DEFAULT_BUDGET_BYTES
    results = run_scaling_suite(lengths=lengths, budget_bytes=budget, seed=args.seed or 0)
    print(render_bench_table(results))
    return 0


def cmd_gen_data(args) -> int:
    samples = generate_planted_corpus(n_samples=args.n, gap_tokens=args.gap, seed=args.seed or 0)
    out = args.out
    if not out:
        cfg = RunConfig()
        out_dir = resolve_out_dir(cfg)
        os.makedirs(out_dir, exist_ok=True)
        out = os.path.join(out_dir, "planted.jsonl")
    else:
        parent = os.path.dirname(out)
        if parent:
            os.makedirs(parent, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(
                {"code": s.code, "label": s.label, "cwe": s.cwe, "split": s.split},
                sort_keys=True,
            ) + "\n")
    n_pos = sum(s.label for s in samples)
    print(f"wrote {len(samples)} samples ({n_pos} vulnerable) to {out}")
    return 0


def cmd_inspect_schedule(args) -> int:
    offset, period = 2, 8
    if getattr(args, "config", None):
        cfg, _ = load_run_config(args.config)
        offset, period = cfg.attention_offset, cfg.attention_period
    schedule = build_schedule(args.layers, offset, period)
    for i, kind in enumerate(schedule):
        print(f"{i:3d}  {kind}")
    counts = {k: schedule.count(k) for k in ("mamba", "attention", "moe")}
    print(f"total: {len(schedule)} layers "
          f"({counts['mamba']} mamba, {counts['attention']} attention, {counts['moe']} moe)")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vulnlm",
        description="Long-context hybrid sequence model for code vulnerability detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, checkpoint=False):
        p.add_argument("--config", help="JSON run-config file; flags override its values")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("--out-dir", help="output directory (default: $VULNLM_OUT_DIR or ./runs)")
        if dataset:
            p.add_argument("--dataset", required=True, help="JSONL dataset path")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint (.npz)")

    p = sub.add_parser("pretrain", help="causal LM + infill pretraining on raw code")
    common(p, dataset=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="class-weighted classification fine-tuning")
    common(p, dataset=True, checkpoint=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a grouped report")
    common(p, dataset=True)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    p.add_argument("--group-by", choices=("cwe", "length"), default="cwe")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="peak-memory scaling suite (linear vs quadratic)")
    p.add_argument("--lengths", help="comma-separated sequence lengths")
    p.add_argument("--budget-bytes", type=int, help="byte budget for the quadratic reference")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write a synthetic planted-vulnerability corpus")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--gap", type=int, default=0, help="filler tokens between the paired patterns")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output JSONL path (default: <out-dir>/planted.jsonl)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inspect-schedule", help="print the layer-kind sequence")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--config", help="JSON run-config file (for offset/period)")
    p.set_defaults(func=cmd_inspect_schedule)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
