"""Shared toy-task builders for the integration and acceptance tests."""

import string

import numpy as np
import pytest

from nmtlab.corpus import ParallelPair

# 30-symbol alphabet for the deterministic pretraining grammar: sentences are
# runs of consecutive symbols (wrapping), so every masked token is recoverable
# from its neighbours.
GRAMMAR_SYMBOLS = list(string.ascii_lowercase) + ["é", "ø", "ß", "ñ"]

# Copy-with-substitution task: each source word maps to one target word.
SRC_WORDS = ["ka", "be", "du", "fo", "gi", "ha", "ji", "ku", "lo", "mu",
             "ne", "po", "qi", "ru", "sa", "te", "vu", "wa", "xe", "zo"]
TGT_WORDS = [w.upper() for w in SRC_WORDS]
WORD_MAP = dict(zip(SRC_WORDS, TGT_WORDS))


def grammar_sentences(n=200, seed=0, min_len=6, max_len=14):
    rng = np.random.default_rng(seed)
    sentences = []
    m = len(GRAMMAR_SYMBOLS)
    for _ in range(n):
        start = int(rng.integers(m))
        length = int(rng.integers(min_len, max_len + 1))
        sentences.append(" ".join(GRAMMAR_SYMBOLS[(start + i) % m]
                                  for i in range(length)))
    return sentences


def copy_task_pairs(n=500, seed=0, min_len=3, max_len=9, punctuate=True):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        words = [SRC_WORDS[int(k)] for k in rng.integers(len(SRC_WORDS),
                                                         size=rng.integers(min_len, max_len + 1))]
        src = " ".join(words)
        tgt = " ".join(WORD_MAP[w] for w in words)
        if punctuate and i % 2 == 0:
            src += " ."
            tgt += " ."
        pairs.append(ParallelPair(src, tgt))
    return pairs


@pytest.fixture
def toy_parallel_files(tmp_path):
    def write(n_train=60, n_test=8, seed=0):
        train = copy_task_pairs(n_train, seed=seed)
        test = copy_task_pairs(n_test, seed=seed + 1)
        paths = {}
        for name, pairs, side in (("train_src", train, "source"),
                                  ("train_tgt", train, "reference"),
                                  ("test_src", test, "source"),
                                  ("test_ref", test, "reference")):
            p = tmp_path / f"{name}.txt"
            p.write_text("".join(getattr(pair, side) + "\n" for pair in pairs),
                         encoding="utf-8")
            paths[name] = p
        return paths

    return write
