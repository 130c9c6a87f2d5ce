"""Classification metrics, the budgeted false-negative-rate score, and
grouped reporting (by CWE tag or token-length bin).

Headline metrics report 0.0 when a denominator is zero; grouped rows mark
those metrics undefined instead, so per-group tables stay honest. The
budgeted score vd_s is the minimum false-negative rate over all decision
thresholds whose false-positive rate stays within the budget (default
0.005); the all-negative threshold always qualifies, so the degenerate
answer is 1.0, and lower is better.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion_from_predictions",
    "basic_metrics",
    "vd_s",
    "LENGTH_BINS",
    "length_bin_label",
    "grouped_report",
    "render_report_text",
    "render_table",
]

LENGTH_BINS = ((0, 16384), (16384, 32768), (32768, 65536), (65536, 131072))


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    group: str | None = None
    n: int = 0
    undefined: tuple = ()       # metric names whose denominator was zero
    vd_s: float | None = None


def confusion_from_predictions(labels, preds) -> ConfusionCounts:
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if y.shape != p.shape:
        raise ValueError("labels and predictions must align")
    if y.size == 0:
        raise ValueError("empty evaluation set")
    if np.any((y != 0) & (y != 1)) or np.any((p != 0) & (p != 1)):
        raise ValueError("labels and predictions must be 0/1")
    return ConfusionCounts(
        tp=int(np.sum((y == 1) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fp=int(np.sum((y == 0) & (p == 1))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def basic_metrics(counts: ConfusionCounts, group: str | None = None) -> MetricsReport:
    if counts.total == 0:
        raise ValueError("metrics need at least one evaluated sample")
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    accuracy = (counts.tp + counts.tn) / counts.total
    precision = ratio(counts.tp, counts.tp + counts.fp, "precision")
    recall = ratio(counts.tp, counts.tp + counts.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return MetricsReport(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        counts=counts, group=group, n=counts.total, undefined=tuple(undefined),
    )


def vd_s(scores, labels, fpr_budget: float = 0.005) -> float:
    """Minimum FNR over thresholds with FPR <= fpr_budget (predict positive at
    score >= threshold). Requires both classes present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D arrays")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("vd_s needs at least one positive and one negative label")

    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    tp_cum = np.cumsum(y_sorted == 1)
    fp_cum = np.cumsum(y_sorted == 0)
    # valid cuts: after each block of tied scores, plus the all-negative cut (k=0)
    block_end = np.nonzero(np.diff(s_sorted) != 0)[0]           # cut between i and i+1
    ks = np.concatenate([[0], block_end + 1, [s.size]])
    best = 1.0
    for k in ks:
        fp = 0 if k == 0 else int(fp_cum[k - 1])
        tp = 0 if k == 0 else int(tp_cum[k - 1])
        if fp / n_neg <= fpr_budget:
            best = min(best, (n_pos - tp) / n_pos)
    return best


def length_bin_label(n_tokens: int) -> str:
    for lo, hi in LENGTH_BINS:
        if lo <= n_tokens < hi:
            return f"[{lo}, {hi})"
    return f"[{LENGTH_BINS[-1][1]}, inf)"


def grouped_report(samples, preds, scores=None, group_by: str = "cwe") -> dict:
    """Per-group metrics plus an overall row.

    samples carry .label, .cwe, .code; group_by is "cwe" or "length".
    Returns the documented report structure: {"group_by", "overall", "groups"}.
    """
    if group_by not in ("cwe", "length"):
        raise ValueError(f"unknown grouping {group_by!r}")
    p = np.asarray(preds, dtype=np.int64)
    if len(samples) != p.size:
        raise ValueError("one prediction per sample required")
    sc = None if scores is None else np.asarray(scores, dtype=np.float64)

    def key_of(sample):
        if group_by == "cwe":
            return sample.cwe if sample.cwe else "uncategorized"
        return length_bin_label(len(sample.code.encode("utf-8")))

    labels = np.array([s.label for s in samples], dtype=np.int64)
    keys = [key_of(s) for s in samples]

    def row(mask, name=None):
        counts = confusion_from_predictions(labels[mask], p[mask])
        rep = basic_metrics(counts, group=name)
        vds = None
        both_classes = counts.tp + counts.fn > 0 and counts.tn + counts.fp > 0
        if sc is not None and both_classes:
            vds = vd_s(sc[mask], labels[mask])
        undefined = rep.undefined if name is not None else rep.undefined
        if sc is not None and not both_classes:
            undefined = tuple(undefined) + ("vd_s",)
        return dataclasses.replace(rep, vd_s=vds, undefined=undefined)

    overall = row(np.ones(len(samples), dtype=bool))
    groups = []
    for key in sorted(set(keys)):
        mask = np.array([k == key for k in keys])
        groups.append(row(mask, name=key))

    assert sum(g.counts.total for g in groups) == overall.counts.total  # partition
    return {
        "group_by": group_by,
        "overall": _report_dict(overall),
        "groups": [_report_dict(g) for g in groups],
    }


def _report_dict(rep: MetricsReport) -> dict:
    d = {
        "group": rep.group,
        "n": rep.n,
        "tp": rep.counts.tp,
        "tn": rep.counts.tn,
        "fp": rep.counts.fp,
        "fn": rep.counts.fn,
        "accuracy": rep.accuracy,
        "precision": rep.precision,
        "recall": rep.recall,
        "f1": rep.f1,
        "vd_s": rep.vd_s,
        "undefined": list(rep.undefined),
    }
    return d


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Plain-text table with aligned columns (first column left, rest right)."""
    widths = [len(h) for h in headers]
    for r in rows:
        for i, cell in enumerate(r):
            widths[i] = max(widths[i], len(cell))

    def fmt(cells):
        parts = []
        for i, cell in enumerate(cells):
            parts.append(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]))
        return "  ".join(parts).rstrip()

    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


def _cell(value, undefined, name):
    if name in undefined:
        return "n/a"
    if value is None:
        return "-"
    return f"{value:.4f}"


def render_report_text(report: dict) -> str:
    headers = ["group", "n", "tp", "fp", "fn", "tn", "acc", "prec", "rec", "f1", "vd-s"]
    rows = []
    for rep in report["groups"] + [dict(report["overall"], group="overall")]:
        und = rep["undefined"]
        rows.append([
            str(rep["group"]),
            str(rep["n"]),
            str(rep["tp"]), str(rep["fp"]), str(rep["fn"]), str(rep["tn"]),
            f"{rep['accuracy']:.4f}",
            _cell(rep["precision"], und, "precision"),
            _cell(rep["recall"], und, "recall"),
            _cell(rep["f1"], und, "f1"),
            _cell(rep["vd_s"], und, "vd_s"),
        ])
    return render_table(headers, rows)


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
