"""Tokenizer, dataset ingestion, and the planted-vulnerability generator.

The tokenizer is byte-level: ids 0-255 are raw bytes, then six specials
(pad, bos, eos, and the three infill sentinels). Ingestion reads JSONL with
one record per line; malformed lines are collected, not fatal, but an
unusable label domain or an empty result is.

The planted corpus is built so the vulnerability is a *relation*, not a
surface token: every sample allocates the same multiset of buffer sizes
{32, 32, 96, 96} under four freshly drawn names, then writes index 64 into
one named buffer far downstream. The sample is vulnerable exactly when the
written name was allocated small. No token histogram separates the classes;
a model must bind the written name to its allocation size across the gap.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

__all__ = [
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "FIM_PRE_ID",
    "FIM_MID_ID",
    "FIM_SUF_ID",
    "VOCAB_SIZE",
    "ByteTokenizer",
    "LabeledSample",
    "IngestError",
    "IngestResult",
    "ingest_jsonl",
    "generate_planted_corpus",
    "train_heldout_split",
]

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
FIM_PRE_ID = 259
FIM_MID_ID = 260
FIM_SUF_ID = 261
VOCAB_SIZE = 262

_SPECIALS = {PAD_ID, BOS_ID, EOS_ID, FIM_PRE_ID, FIM_MID_ID, FIM_SUF_ID}


class ByteTokenizer:
    """Reversible byte-level tokenizer; specials sit above the byte range."""

    vocab_size = VOCAB_SIZE
    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID

    def encode(self, text, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        head = [BOS_ID] if add_bos else []
        tail = [EOS_ID] if add_eos else []
        if head or tail:
            ids = np.concatenate([np.array(head, dtype=np.int64), ids, np.array(tail, dtype=np.int64)])
        return ids

    def decode_bytes(self, ids) -> bytes:
        arr = np.asarray(ids)
        keep = arr[(arr >= 0) & (arr < 256)]
        return keep.astype(np.uint8).tobytes()

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


@dataclasses.dataclass
class LabeledSample:
    code: str
    label: int
    cwe: str | None = None
    split: str = "train"


@dataclasses.dataclass
class IngestError:
    line_no: int  # 1-based
    reason: str


@dataclasses.dataclass
class IngestResult:
    samples: list
    errors: list

    @property
    def n_valid(self) -> int:
        return len(self.samples)


_VALID_LABELS = {0: 0, 1: 1, False: 0, True: 1, 0.0: 0, 1.0: 1}


def _coerce_label(raw):
    if isinstance(raw, bool):
        return int(raw)
    if isinstance(raw, int) and raw in (0, 1):
        return raw
    if isinstance(raw, float) and raw in (0.0, 1.0):
        return int(raw)
    return None


def ingest_jsonl(path: str) -> IngestResult:
    """Read a JSONL dataset: fields code|func (str), label|target (binary), optional cwe, split.

    Malformed lines land in the error list with their line numbers. A label
    value outside the binary domain, or a file with zero valid records,
    raises.
    """
    samples: list[LabeledSample] = []
    errors: list[IngestError] = []
    domain_violations: list[tuple[int, object]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                errors.append(IngestError(line_no, f"invalid JSON: {e.msg}"))
                continue
            if not isinstance(rec, dict):
                errors.append(IngestError(line_no, "record is not an object"))
                continue
            code = rec.get("code", rec.get("func"))
            if not isinstance(code, str) or not code:
                errors.append(IngestError(line_no, "missing or empty code/func field"))
                continue
            raw_label = rec.get("label", rec.get("target"))
            if raw_label is None:
                errors.append(IngestError(line_no, "missing label/target field"))
                continue
            label = _coerce_label(raw_label)
            if label is None:
                domain_violations.append((line_no, raw_label))
                continue
            cwe = rec.get("cwe")
            if isinstance(cwe, list):
                cwe = cwe[0] if cwe and isinstance(cwe[0], str) else None
            if not isinstance(cwe, str):
                cwe = None
            split = rec.get("split", "train")
            if split not in ("train", "val", "test"):
                errors.append(IngestError(line_no, f"unknown split {split!r}"))
                continue
            samples.append(LabeledSample(code=code, label=label, cwe=cwe, split=split))
    if domain_violations:
        shown = ", ".join(f"line {ln}: {v!r}" for ln, v in domain_violations[:5])
        raise ValueError(f"label domain is not binary 0/1 ({len(domain_violations)} offending lines: {shown})")
    if not samples:
        raise ValueError(f"zero valid records in {path} ({len(errors)} errors)")
    return IngestResult(samples=samples, errors=errors)


# --------------------------------------------------------------- planted data

# letters that never occur in the template keywords (void, f, char, src,
# memset, if, int, acc) so a buffer-name byte is unambiguous wherever it appears
_NAME_ALPHABET = "bgjklpquwxyz"
_SMALL, _BIG = 32, 96
_WRITE_INDEX = 64
_FILLER_LINE = "    acc = acc + {};\n"  # constant width: digit placeholder


def _draw_names(rng: np.random.Generator, k: int) -> list[str]:
    # pairwise-distinct first letters keep name identity readable from a
    # single byte; the second letter widens the pool past corpus size
    names: list[str] = []
    while len(names) < k:
        cand = "".join(rng.choice(list(_NAME_ALPHABET), size=2))
        if all(cand[0] != n[0] for n in names):
            names.append(cand)
    return names


def generate_planted_corpus(
    n_samples: int,
    gap_tokens: int,
    seed: int,
    positive_fraction: float = 0.5,
    n_buffers: int = 4,
) -> list[LabeledSample]:
    """Synthetic C-like functions with a plantable out-of-bounds write.

    Each sample declares n_buffers stack buffers whose sizes are a fixed
    multiset (half 32, half 96, shuffled), clears one of them with a correctly
    sized memset, pads with >= gap_tokens bytes of filler, then performs a
    guarded write of index 64 through one of the declared names:

        if (64 < N) { name[64] = src[0]; }

    The guard constant N is the claimed capacity of the written buffer. When
    N = 32 the guard rejects the write and the sample is safe whatever the
    buffer size. When N = 96 the write executes and the sample is vulnerable
    exactly when the named buffer is the small (32 byte) one, i.e. when the
    claimed capacity overstates the true one. The guard constant alone
    therefore bounds a local classifier (predict-vulnerable-iff-N=96 has
    precision 0.6 at the default mix) while exceeding that bound requires
    resolving which size was declared for the written name. Token length
    distributions are identical across labels by construction.
    """
    if n_buffers < 2 or n_buffers % 2 != 0:
        raise ValueError("n_buffers must be even and >= 2")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    sizes_multiset = [_SMALL] * (n_buffers // 2) + [_BIG] * (n_buffers // 2)
    filler_lines = math.ceil(gap_tokens / len(_FILLER_LINE.format(0))) if gap_tokens > 0 else 0

    # exact composition by construction, not in expectation. categories:
    #   1: guard N=32, write skipped, safe, written buffer either size
    #   2: guard N=96, written buffer 32 -> vulnerable
    #   3: guard N=96, written buffer 96 -> safe
    # negatives split 1:2 between categories 1 and 3 so that the guard digit
    # alone caps a local classifier well below a perfect one
    n_pos = int(round(positive_fraction * n_samples))
    n_neg = n_samples - n_pos
    n_cat1 = n_neg // 3
    categories = np.array([1] * n_cat1 + [2] * n_pos + [3] * (n_neg - n_cat1), dtype=np.int64)
    rng.shuffle(categories)

    samples = []
    for cat in categories:
        cat = int(cat)
        label = 1 if cat == 2 else 0
        names = _draw_names(rng, n_buffers)
        sizes = list(sizes_multiset)
        rng.shuffle(sizes)
        by_size = {s: [n for n, sz in zip(names, sizes) if sz == s] for s in (_SMALL, _BIG)}
        if cat == 1:
            guard = _SMALL
            pool = names  # write rejected; target size irrelevant
        elif cat == 2:
            guard = _BIG
            pool = by_size[_SMALL]
        else:
            guard = _BIG
            pool = by_size[_BIG]
        target = pool[int(rng.integers(0, len(pool)))]
        cleared = names[int(rng.integers(0, n_buffers))]
        cleared_size = sizes[names.index(cleared)]

        lines = ["void f(char *src) {\n"]
        for name, size in zip(names, sizes):
            lines.append(f"    char {name}[{size}];\n")
        lines.append(f"    memset({cleared}, 0, {cleared_size});\n")
        if filler_lines:
            lines.append("    int acc = 0;\n")
            for _ in range(filler_lines):
                lines.append(_FILLER_LINE.format(int(rng.integers(0, 10))))
        lines.append(f"    if ({_WRITE_INDEX} < {guard}) {{ {target}[{_WRITE_INDEX}] = src[0]; }}\n")
        lines.append("}\n")
        samples.append(
            LabeledSample(code="".join(lines), label=label, cwe="CWE-787" if label == 1 else None)
        )
    return samples


def generate_reuse_corpus(n_samples: int, seed: int) -> list[str]:
    """Unlabeled C-like snippets dominated by identifier reuse.

    Every snippet declares two short variables and then reuses each of them
    several times within a few statements, so most of a snippet's entropy is
    resolvable by copying earlier occurrences. Useful as an early pretraining
    stage: next-byte prediction on this corpus rewards content retrieval far
    more densely than ordinary code does.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        a, b = _draw_names(rng, 2)
        d1, d2 = int(rng.integers(0, 10)), int(rng.integers(0, 10))
        stmts = [
            f"int {a} = {d1};\n",
            f"int {b} = {d2};\n",
            f"{a} = {a} + {b};\n",
            f"{b} = {b} + {a};\n",
            f"src[{a}] = {b};\n",
        ]
        order = rng.permutation(3) + 2  # shuffle the three reuse statements
        out.append(stmts[0] + stmts[1] + "".join(stmts[i] for i in order))
    return out


def train_heldout_split(samples: list, heldout_fraction: float, seed: int):
    """Deterministic stratified split; returns (train, heldout)."""
    rng = np.random.default_rng(seed)
    train, held = [], []
    for label in (0, 1):
        group = [s for s in samples if s.label == label]
        order = rng.permutation(len(group))
        n_held = int(round(heldout_fraction * len(group)))
        held_idx = set(order[:n_held].tolist())
        for i, s in enumerate(group):
            (held if i in held_idx else train).append(s)
    return train, held
