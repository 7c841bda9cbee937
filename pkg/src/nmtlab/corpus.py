"""Text ingestion, frequency tables, and token-budget batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("nmtlab")

# Sentences are plain strings: one line of UTF-8 text, no newline inside.
Sentence = str


@dataclass(frozen=True)
class ParallelPair:
    source: Sentence
    reference: Sentence


@dataclass
class FrequencyTable:
    """Occurrence counts over subword tokens of a tokenized corpus."""

    counts: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def count(self, token: int) -> int:
        # Unseen tokens are treated as singletons by downstream samplers.
        return self.counts.get(token, 0)


@dataclass
class TokenBatch:
    """Padded batch of token-id sequences.

    `ids` is [batch, max_len] int32 padded with `pad_id`; `lengths` holds the
    true (unpadded) lengths.
    """

    ids: np.ndarray
    lengths: np.ndarray
    pad_id: int

    @property
    def sequences(self) -> list[list[int]]:
        return [list(map(int, row)) for row in self.ids]

    @property
    def total_tokens(self) -> int:
        return int(self.lengths.sum())

    @property
    def max_len(self) -> int:
        return int(self.lengths.max())

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])

    def pad_mask(self) -> np.ndarray:
        """Boolean [batch, max_len], True where the position is padding."""
        return self.ids == self.pad_id

    @classmethod
    def from_sequences(cls, seqs: list[list[int]], pad_id: int) -> "TokenBatch":
        if not seqs:
            raise ValueError("cannot build a batch from zero sequences")
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        width = int(lengths.max())
        ids = np.full((len(seqs), width), pad_id, dtype=np.int32)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return cls(ids=ids, lengths=lengths, pad_id=pad_id)


def load_mono(path) -> list[Sentence]:
    """Read one sentence per line; empty (whitespace-only) lines are dropped."""
    sentences = []
    dropped_empty = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise ValueError(f"{path}: invalid UTF-8 on line {lineno}: {e}") from e
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                dropped_empty += 1
                continue
            sentences.append(line)
    if dropped_empty:
        log.info("dropped_long=0 dropped_empty=%d", dropped_empty)
    return sentences


def load_parallel(src_path, tgt_path) -> list[ParallelPair]:
    """Read line-aligned parallel files; pairs with an empty side are dropped."""
    src_lines = _read_lines_raw(src_path)
    tgt_lines = _read_lines_raw(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line-count mismatch: {src_path} has {len(src_lines)} lines, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    pairs = []
    dropped_empty = 0
    for s, t in zip(src_lines, tgt_lines):
        if not s.strip() or not t.strip():
            dropped_empty += 1
            continue
        pairs.append(ParallelPair(source=s, reference=t))
    if dropped_empty:
        log.info("dropped_long=0 dropped_empty=%d", dropped_empty)
    return pairs


def _read_lines_raw(path) -> list[str]:
    with open(path, "rb") as f:
        data = f.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ValueError(f"{path}: invalid UTF-8: {e}") from e
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln.rstrip("\r") for ln in lines]


def build_frequency_table(sentences, tokenizer) -> FrequencyTable:
    """Count subword tokens over `sentences` segmented by `tokenizer`."""
    counts = Counter()
    for s in sentences:
        counts.update(tokenizer.apply(s))
    return FrequencyTable(counts=dict(counts))


def batch_index_groups(
    lengths: list[int],
    token_budget: int,
    max_len: int,
    shuffle_seed: int,
    bucket_size: int = 1024,
) -> list[list[int]]:
    """Partition sequence indices into token-budgeted groups.

    Indices whose length exceeds `max_len` are dropped (counted on the
    diagnostics stream). Deterministic under `shuffle_seed`: a seeded shuffle,
    then length-sorting inside buckets of `bucket_size` to reduce padding.
    """
    if token_budget < max_len:
        raise ValueError(f"token_budget {token_budget} < max_len {max_len}")
    kept = [i for i, n in enumerate(lengths) if n <= max_len]
    dropped_long = len(lengths) - len(kept)
    if dropped_long:
        log.info("dropped_long=%d dropped_empty=0", dropped_long)
    if not kept:
        return []

    rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    order = rng.permutation(len(kept))
    ordered = []
    for start in range(0, len(order), bucket_size):
        bucket = [kept[i] for i in order[start : start + bucket_size]]
        # Stable sort keeps the shuffled order among equal lengths.
        bucket.sort(key=lambda i: lengths[i])
        ordered.extend(bucket)

    groups: list[list[int]] = []
    current: list[int] = []
    current_tokens = 0
    for i in ordered:
        if current and current_tokens + lengths[i] > token_budget:
            groups.append(current)
            current, current_tokens = [], 0
        current.append(i)
        current_tokens += lengths[i]
    if current:
        groups.append(current)
    return groups


def make_batches(
    sequences: list[list[int]],
    token_budget: int,
    max_len: int,
    shuffle_seed: int,
    pad_id: int,
    bucket_size: int = 1024,
) -> list[TokenBatch]:
    """Group sequences into padded batches whose unpadded token sum stays
    within `token_budget`; over-long sequences are dropped, not truncated."""
    groups = batch_index_groups(
        [len(s) for s in sequences], token_budget, max_len, shuffle_seed, bucket_size
    )
    return [
        TokenBatch.from_sequences([sequences[i] for i in group], pad_id)
        for group in groups
    ]
