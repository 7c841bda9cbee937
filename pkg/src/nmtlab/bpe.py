"""Byte-pair-encoding subword segmentation: learning, applying, inverting.

Source and target sides use separate models; vocabularies are never shared.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"

SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)

EOW = "</w>"


@dataclass
class BpeModel:
    """Learned merge table plus token vocabulary.

    `merges` is in learning order. Specials occupy ids 0..3; learned tokens
    fill the remaining dense id range.
    """

    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    eow_marker: str = EOW
    _cache: dict[str, list[str]] = field(default_factory=dict, repr=False)
    _id_to_token: dict[int, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._id_to_token:
            self._id_to_token = {i: t for t, i in self.vocab.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def segment_word(self, word: str) -> list[str]:
        """Split a word into subword symbols by replaying the merge table."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = _word_to_symbols(word, self.eow_marker)
        for pair in self.merges:
            if len(symbols) < 2:
                break
            symbols = _merge_pair(symbols, pair)
        self._cache[word] = symbols
        return symbols

    def apply(self, sentence: str) -> list[int]:
        """Tokenize a sentence to ids; symbols missing from the vocab become UNK."""
        ids = []
        for word in sentence.split():
            for sym in self.segment_word(word):
                ids.append(self.vocab.get(sym, UNK_ID))
        return ids

    def decode(self, ids: list[int]) -> str:
        """Inverse of `apply`: join subwords, restore spaces, strip specials."""
        pieces = []
        for i in ids:
            tok = self._id_to_token.get(int(i))
            if tok is None:
                raise ValueError(f"token id {i} out of range for vocab of {len(self.vocab)}")
            if tok in SPECIAL_TOKENS:
                continue
            pieces.append(tok)
        text = "".join(pieces).replace(self.eow_marker, " ")
        return text.strip()


def _word_to_symbols(word: str, eow: str) -> list[str]:
    chars = list(word)
    if chars:
        chars[-1] = chars[-1] + eow
    return chars


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    left, right = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def learn_bpe(corpus: list[str], num_merges: int) -> BpeModel:
    """Learn a merge table by greedily joining the most frequent adjacent pair.

    Words start as characters with an end-of-word marker on the last one.
    Frequency ties break lexicographically on the (left, right) pair, so
    learning is fully deterministic. Stops early when no pair occurs twice.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq = Counter()
    for sentence in corpus:
        word_freq.update(sentence.split())
    if not word_freq:
        raise ValueError("cannot learn BPE from an empty corpus")

    words = {w: _word_to_symbols(w, EOW) for w in word_freq}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_counts = Counter()
        for w, symbols in words.items():
            freq = word_freq[w]
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += freq
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        if pair_counts[best] < 2:
            break
        merges.append(best)
        for w in words:
            words[w] = _merge_pair(words[w], best)

    vocab: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    symbols_seen = set()
    for w in word_freq:
        symbols_seen.update(_word_to_symbols(w, EOW))
    symbols_seen.update(a + b for a, b in merges)
    for sym in sorted(symbols_seen):
        if sym not in vocab:
            vocab[sym] = len(vocab)
    return BpeModel(merges=merges, vocab=vocab)


def apply_bpe(model: BpeModel, sentence: str) -> list[int]:
    return model.apply(sentence)


def debpe(model: BpeModel, ids: list[int]) -> str:
    return model.decode(ids)


def save_model(model: BpeModel, merges_path, vocab_path) -> None:
    with open(merges_path, "w", encoding="utf-8") as f:
        f.write(f"#bpe v1 merges={len(model.merges)}\n")
        for left, right in model.merges:
            f.write(f"{left}\t{right}\n")
    with open(vocab_path, "w", encoding="utf-8") as f:
        for token, idx in sorted(model.vocab.items(), key=lambda kv: kv[1]):
            f.write(f"{token}\t{idx}\n")


def load_model(merges_path, vocab_path) -> BpeModel:
    with open(merges_path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith("#bpe v1"):
            raise ValueError(f"{merges_path}: not a v1 BPE merge table (header {header!r})")
        merges = []
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            left, right = line.split("\t")
            merges.append((left, right))
    vocab: dict[str, int] = {}
    with open(vocab_path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            token, idx = line.rsplit("\t", 1)
            vocab[token] = int(idx)
    return BpeModel(merges=merges, vocab=vocab)
