"""Peak-memory scaling benchmark: the segmented linear-memory attention path
against a quadratic full-score-matrix reference.

"Memory" here is peak transient allocation attributable to the attention
computation, measured with tracemalloc (numpy routes its buffers through the
traced allocator), not process RSS. The quadratic reference refuses lengths
whose score matrix alone would blow the configured byte budget and reports
completed=False for them, which is the desk-scale stand-in for an OOM row.
"""

from __future__ import annotations

import dataclasses
import gc
import time
import tracemalloc

import numpy as np

from .attention import AttentionConfig, attention_forward, init_attention_params
from .autodiff import Tensor, no_grad
from .metrics import render_table

__all__ = [
    "LINEAR",
    "QUADRATIC",
    "DEFAULT_LENGTHS",
    "DEFAULT_BUDGET_BYTES",
    "BenchResult",
    "quadratic_reference_attention",
    "score_matrix_bytes",
    "run_scaling_suite",
    "render_bench_table",
]

LINEAR = "linear"
QUADRATIC = "quadratic"

DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384)
DEFAULT_BUDGET_BYTES = 64 * 1024 * 1024
DEFAULT_D_HEAD = 32
DEFAULT_SEGMENT_LENGTH = 256


@dataclasses.dataclass(frozen=True)
class BenchResult:
    kind: str
    length: int
    peak_bytes: int
    wall_time_s: float
    completed: bool

    def __post_init__(self):
        if self.kind not in (LINEAR, QUADRATIC):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.completed and self.peak_bytes <= 0:
            raise ValueError("a completed run must report positive peak bytes")


def score_matrix_bytes(t: int, itemsize: int = 8) -> int:
    """Bytes of the dense T x T score matrix the quadratic path materializes."""
    return t * t * itemsize


def quadratic_reference_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal softmax attention with the full T x T score matrix, plain numpy.

    Matches the segmented path on single-segment inputs (same scaling, same
    finite mask value, same row-max-shifted softmax).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError("q, k, v must share one [T, d_head] shape")
    t, d = q.shape
    if t < 1:
        raise ValueError("need at least one position")
    scores = (q @ k.T) * (1.0 / np.sqrt(d))
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(future, -1e30, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return weights @ v


def _measure(fn):
    """Run fn() alone under the tracing allocator; return (result, peak_bytes, seconds)."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    gc.collect()
    tracemalloc.reset_peak()
    baseline, _ = tracemalloc.get_traced_memory()
    t0 = time.perf_counter()
    out = fn()
    elapsed = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return out, max(1, peak - baseline), elapsed


def _bench_linear(t: int, d_head: int, segment_length: int, rng) -> BenchResult:
    cfg = AttentionConfig(d_model=d_head, n_heads=1, segment_length=segment_length)
    params = init_attention_params(cfg, rng, np.float64)
    x = rng.normal(size=(1, t, d_head))

    def run():
        with no_grad():
            return attention_forward(Tensor(x), cfg, params)

    _, peak, elapsed = _measure(run)
    return BenchResult(LINEAR, t, peak, elapsed, True)


def _bench_quadratic(t: int, d_head: int, budget_bytes: int, rng) -> BenchResult:
    if score_matrix_bytes(t) > budget_bytes:
        return BenchResult(QUADRATIC, t, 0, 0.0, False)
    q = rng.normal(size=(t, d_head))
    k = rng.normal(size=(t, d_head))
    v = rng.normal(size=(t, d_head))
    _, peak, elapsed = _measure(lambda: quadratic_reference_attention(q, k, v))
    return BenchResult(QUADRATIC, t, peak, elapsed, True)


def run_scaling_suite(
    lengths=DEFAULT_LENGTHS,
    budget_bytes: int = DEFAULT_BUDGET_BYTES,
    d_head: int = DEFAULT_D_HEAD,
    segment_length: int = DEFAULT_SEGMENT_LENGTH,
    seed: int = 0,
) -> list[BenchResult]:
    """Both attention kinds at every length, sequentially, smallest first."""
    lengths = [int(t) for t in lengths]
    if not lengths:
        raise ValueError("need at least one length")
    if any(t < 1 for t in lengths):
        raise ValueError("lengths must be >= 1")
    if sorted(lengths) != lengths:
        raise ValueError("lengths must be sorted ascending")
    if budget_bytes < 1:
        raise ValueError("budget_bytes must be positive")
    rng = np.random.default_rng(seed)
    results = []
    for t in lengths:
        results.append(_bench_linear(t, d_head, segment_length, rng))
        results.append(_bench_quadratic(t, d_head, budget_bytes, rng))
    return results


def render_bench_table(results: list[BenchResult]) -> str:
    """One row per length, peak MB and wall seconds per kind; OOM for rows
    that exceeded the budget."""
    by_length: dict[int, dict] = {}
    for r in results:
        by_length.setdefault(r.length, {})[r.kind] = r

    def peak_cell(r):
        if r is None:
            return "-"
        return f"{r.peak_bytes / 2**20:.1f}" if r.completed else "OOM"

    def time_cell(r):
        if r is None or not r.completed:
            return "-"
        return f"{r.wall_time_s:.3f}"

    rows = []
    for t in sorted(by_length):
        lin = by_length[t].get(LINEAR)
        quad = by_length[t].get(QUADRATIC)
        rows.append([str(t), peak_cell(lin), peak_cell(quad), time_cell(lin), time_cell(quad)])
    headers = ["length", "linear peak MB", "quadratic peak MB", "linear s", "quadratic s"]
    return render_table(headers, rows)
