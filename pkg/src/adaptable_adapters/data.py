"""Datasets: synthetic token tasks, delimited-text ingestion and low-data splits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)

PAD, SEP, UNK, CLS = 0, 1, 2, 3
NUM_RESERVED = 4
DEV_FRACTION = 0.25

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@dataclass
class Dataset:
    ids: np.ndarray          # (N, max_seq_len) int64, PAD-filled
    labels: np.ndarray       # (N,) int64
    num_classes: int
    task_id: str
    metric: str = "accuracy"
    vocab_size: int = 2048
    label_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.metric not in ("accuracy", "matthews"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab_size):
            raise ValueError("token ids outside [0, vocab_size)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def mask(self) -> np.ndarray:
        m = self.ids != PAD
        m[:, 0] |= ~m.any(axis=1)  # keep one position so pooling is defined
        return m

    def token_ids(self, i: int) -> list[int]:
        row = self.ids[i]
        return row[row != PAD].tolist()

    def fingerprint(self) -> str:
        h = FNV_OFFSET
        for row, y in zip(self.ids, self.labels):
            line = ",".join(str(t) for t in row[row != PAD]) + f"|{int(y)}\n"
            h = fnv1a64(line.encode("ascii"), h)
        return f"{h:016x}"


def _pad(rows: list[list[int]], max_len: int) -> np.ndarray:
    out = np.full((len(rows), max_len), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        r = r[:max_len]
        out[i, :len(r)] = r
    return out


# --------------------------------------------------------------------------
# synthetic tasks

TASK_KINDS = ("keyword-topic", "order-pattern", "majority-token")
_KEYWORDS_PER_CLASS = 6
_MAJORITY_TOKENS_PER_CLASS = 4


def _balanced_labels(rng, size: int, num_classes: int = 2) -> np.ndarray:
    labels = np.arange(size) % num_classes
    rng.shuffle(labels)
    return labels


def _filler(rng, lo: int, vocab: int, n: int) -> list[int]:
    return rng.integers(lo, vocab, n).tolist()


def generate_synthetic_task(kind: str, size: int = 1000, vocab: int = 2048, seed: int = 0,
                            max_seq_len: int = 16, min_len: int = 6, task_id: str | None = None) -> Dataset:
    """Deterministic binary classification over random filler tokens.

    keyword-topic: each example holds 1-3 keywords from its class's keyword set.
    order-pattern: tokens A and B both occur; label 1 iff A comes first.
    majority-token: label is the class whose designated tokens are more frequent.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown synthetic task kind {kind!r}; choose from {TASK_KINDS}")
    if size < 200:
        raise ValueError(f"synthetic tasks need size >= 200, got {size}")
    reserved = NUM_RESERVED + 2 * max(_KEYWORDS_PER_CLASS, _MAJORITY_TOKENS_PER_CLASS)
    if vocab < reserved + 16:
        raise ValueError(f"vocab {vocab} too small for {kind!r}: needs >= {reserved + 16}")
    if max_seq_len < min_len or min_len < 4:
        raise ValueError("need 4 <= min_len <= max_seq_len")
    rng = stream(seed, "synthetic", kind)
    labels = _balanced_labels(rng, size)
    rows = []
    for y in labels:
        n = int(rng.integers(min_len, max_seq_len + 1))
        if kind == "keyword-topic":
            row = _filler(rng, reserved, vocab, n)
            base = NUM_RESERVED + int(y) * _KEYWORDS_PER_CLASS
            count = int(rng.integers(1, 4))
            pos = rng.choice(n, count, replace=False)
            for p in pos:
                row[p] = base + int(rng.integers(0, _KEYWORDS_PER_CLASS))
        elif kind == "order-pattern":
            row = _filler(rng, reserved, vocab, n)
            i, j = sorted(rng.choice(n, 2, replace=False).tolist())
            tok_a, tok_b = NUM_RESERVED, NUM_RESERVED + 1
            row[i], row[j] = (tok_a, tok_b) if y == 1 else (tok_b, tok_a)
        else:
            row = _filler(rng, reserved, vocab, n)
            hi = int(rng.integers(2, 6))
            lo = min(int(rng.integers(0, hi)), n - hi)
            pos = rng.choice(n, hi + lo, replace=False).tolist()
            for cls, count in ((int(y), hi), (1 - int(y), lo)):
                base = NUM_RESERVED + cls * _MAJORITY_TOKENS_PER_CLASS
                for _ in range(count):
                    row[pos.pop()] = base + int(rng.integers(0, _MAJORITY_TOKENS_PER_CLASS))
        rows.append(row)
    return Dataset(_pad(rows, max_seq_len), labels, 2, task_id or kind, "accuracy", vocab)


def majority_label(tokens: list[int]) -> int:
    """Label rule of majority-token examples (ties are never generated)."""
    c = [0, 0]
    for t in tokens:
        for cls in (0, 1):
            base = NUM_RESERVED + cls * _MAJORITY_TOKENS_PER_CLASS
            if base <= t < base + _MAJORITY_TOKENS_PER_CLASS:
                c[cls] += 1
    return int(c[1] > c[0])


def order_label(tokens: list[int]) -> int:
    return int(tokens.index(NUM_RESERVED) < tokens.index(NUM_RESERVED + 1))


# --------------------------------------------------------------------------
# delimited text


def token_id(word: str, vocab_size: int) -> int:
    return NUM_RESERVED + fnv1a64(word.encode("utf-8")) % (vocab_size - NUM_RESERVED)


def tokenize(text: str, vocab_size: int) -> list[int]:
    return [token_id(w, vocab_size) for w in text.casefold().split()]


def load_tsv(path, text_columns, label_column: str, delimiter: str = "\t",
             vocab_size: int = 2048, max_seq_len: int = 16, task_id: str | None = None,
             metric: str = "accuracy") -> Dataset:
    """Read a headed TSV/CSV file; two text columns are joined with the SEP token."""
    if isinstance(text_columns, str):
        text_columns = [text_columns]
    if not 1 <= len(text_columns) <= 2:
        raise ValueError("need one or two text columns")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames
        if not header:
            raise ValueError(f"{path}: empty file")
        for col in [*text_columns, label_column]:
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r} (header: {header})")
        rows, labels, label_map = [], [], {}
        for rec in reader:
            ids = tokenize(rec[text_columns[0]] or "", vocab_size)
            if len(text_columns) == 2:
                ids = ids + [SEP] + tokenize(rec[text_columns[1]] or "", vocab_size)
            lab = rec[label_column]
            if lab not in label_map:
                label_map[lab] = len(label_map)
            rows.append(ids)
            labels.append(label_map[lab])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Dataset(_pad(rows, max_seq_len), np.array(labels), len(label_map),
                   task_id or path.stem, metric, vocab_size, label_map)


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, ...]
    dev: tuple[int, ...]
    test: tuple[int, ...]
    low_data_n: int | None
    split_seed: int

    def check_disjoint(self) -> None:
        a, b, c = set(self.train), set(self.dev), set(self.test)
        if a & b or a & c or b & c:
            raise AssertionError("train/dev/test index sets overlap")


def heldout_indices(dataset: Dataset, test_fraction: float = 0.2) -> np.ndarray:
    """Held-out test rows; fixed per dataset, independent of any run seed."""
    n = len(dataset)
    perm = stream(0, "test-split", dataset.fingerprint()).permutation(n)
    return np.sort(perm[:int(round(test_fraction * n))])


def make_split(dataset: Dataset, low_data_n: int | None, split_seed: int,
               test_fraction: float = 0.2) -> SplitPlan:
    test = heldout_indices(dataset, test_fraction)
    pool = np.setdiff1d(np.arange(len(dataset)), test)
    if low_data_n is not None and low_data_n > len(pool):
        raise ValueError(f"low_data_n={low_data_n} exceeds the {len(pool)}-example training pool")
    rng = stream(split_seed, "train-split", dataset.fingerprint())
    chosen = pool[rng.permutation(len(pool))]
    if low_data_n is not None:
        chosen = chosen[:low_data_n]
    n_dev = int(round(DEV_FRACTION * len(chosen)))
    plan = SplitPlan(tuple(sorted(chosen[n_dev:].tolist())), tuple(sorted(chosen[:n_dev].tolist())),
                     tuple(test.tolist()), low_data_n, split_seed)
    plan.check_disjoint()
    return plan


def setting_label(low_data_n: int | None) -> str:
    return "full" if low_data_n is None else f"n{low_data_n}"
