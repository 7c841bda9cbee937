"""Corpus BLEU, sentence chrF, and the per-sentence translation-quality delta
between noisy-input and clean-input translations."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

BLEU_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2.0

# Pinned normalization applied before whitespace tokenization for BLEU:
# detach punctuation, isolate symbol runs, collapse whitespace. Case is kept.
_BLEU_NORMALIZE = [
    (re.compile(r"([\.,!\?:;\)\]\}\"»’”])"), r" \1 "),
    (re.compile(r"([\(\[\{\"«‘“])"), r" \1 "),
    (re.compile(r"\s+"), " "),
]


@dataclass
class ChrfParams:
    max_ngram: int = CHRF_ORDER
    beta: float = CHRF_BETA

    def __post_init__(self):
        if self.max_ngram < 1:
            raise ValueError("max_ngram must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class DeltaChrfRecord:
    sentence_index: int
    chrf_clean: float
    chrf_noisy: float

    @property
    def delta(self) -> float:
        return self.chrf_noisy - self.chrf_clean


# Histogram bins are centred on -100, -90, ..., 0, ..., 100 (21 bins of
# width 10); exact zeros are additionally counted on their own.
HIST_CENTERS = list(range(-100, 101, 10))


@dataclass
class EvalReport:
    model: str
    noise_kind: str
    noise_rate: float
    noise_seed: int
    test_set: str
    corpus_bleu: float
    records: list[DeltaChrfRecord] = field(default_factory=list)

    @property
    def mean_delta_chrf(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.delta for r in self.records) / len(self.records)

    @property
    def delta_zero_count(self) -> int:
        return sum(1 for r in self.records if r.delta == 0.0)

    @property
    def delta_histogram(self) -> list[int]:
        bins = [0] * len(HIST_CENTERS)
        for r in self.records:
            idx = int(round(r.delta / 10.0)) + 10
            bins[min(max(idx, 0), len(bins) - 1)] += 1
        return bins


def bleu_tokenize(line: str) -> list[str]:
    for pattern, repl in _BLEU_NORMALIZE:
        line = pattern.sub(repl, line)
    return line.split()


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[str], references: list[str]) -> float:
    """Case-sensitive corpus BLEU in [0, 100]: geometric mean of clipped
    1..4-gram precisions times the brevity penalty, no smoothing (any empty
    n-gram overlap gives 0)."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"length mismatch: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty evaluation set")
    correct = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = bleu_tokenize(hyp)
        r = bleu_tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, BLEU_ORDER + 1):
            hc = _ngram_counts(h, n)
            rc = _ngram_counts(r, n)
            total[n - 1] += sum(hc.values())
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if any(t == 0 or c == 0 for c, t in zip(correct, total)):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(correct, total)) / BLEU_ORDER
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)


def sentence_chrf(hypothesis: str, reference: str,
                  params: ChrfParams | None = None) -> float:
    """Character n-gram F-score in [0, 100], whitespace removed, recall
    weighted by beta, precision/recall averaged over orders present in both
    strings."""
    params = params or ChrfParams()
    hyp = re.sub(r"\s+", "", hypothesis)
    ref = re.sub(r"\s+", "", reference)
    if not hyp and not ref:
        return 100.0
    if not hyp or not ref:
        return 0.0
    avg_precision = avg_recall = 0.0
    effective = 0
    for n in range(1, params.max_ngram + 1):
        hc = _ngram_counts(list(hyp), n)
        rc = _ngram_counts(list(ref), n)
        h_total = sum(hc.values())
        r_total = sum(rc.values())
        if h_total == 0 or r_total == 0:
            continue
        common = sum((hc & rc).values())
        avg_precision += common / h_total
        avg_recall += common / r_total
        effective += 1
    if effective == 0:
        return 0.0
    avg_precision /= effective
    avg_recall /= effective
    if avg_precision + avg_recall == 0.0:
        return 0.0
    b2 = params.beta**2
    f = (1 + b2) * avg_precision * avg_recall / (b2 * avg_precision + avg_recall)
    return 100.0 * f


def delta_chrf(clean_hyps: list[str], noisy_hyps: list[str],
               references: list[str],
               params: ChrfParams | None = None) -> list[DeltaChrfRecord]:
    """Per-sentence chrF(noisy translation) - chrF(clean translation), both
    against the same reference (the augmented one for unknown-symbol noise)."""
    if not (len(clean_hyps) == len(noisy_hyps) == len(references)):
        raise ValueError(
            f"misaligned lists: {len(clean_hyps)} clean / {len(noisy_hyps)} noisy "
            f"/ {len(references)} references")
    records = []
    for i, (c, n, r) in enumerate(zip(clean_hyps, noisy_hyps, references)):
        records.append(DeltaChrfRecord(
            sentence_index=i,
            chrf_clean=sentence_chrf(c, r, params),
            chrf_noisy=sentence_chrf(n, r, params)))
    return records


def write_report(report: EvalReport, path) -> None:
    """key=value header block, then one CSV row per sentence."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"model={report.model}\n")
        f.write(f"noise_kind={report.noise_kind}\n")
        f.write(f"noise_rate={report.noise_rate!r}\n")
        f.write(f"noise_seed={report.noise_seed}\n")
        f.write(f"test_set={report.test_set}\n")
        f.write(f"corpus_bleu={report.corpus_bleu!r}\n")
        f.write(f"mean_delta_chrf={report.mean_delta_chrf!r}\n")
        f.write(f"delta_zero_count={report.delta_zero_count}\n")
        f.write("delta_histogram=" + ",".join(map(str, report.delta_histogram)) + "\n")
        f.write("index,chrf_clean,chrf_noisy,delta\n")
        for r in report.records:
            f.write(f"{r.sentence_index},{r.chrf_clean!r},{r.chrf_noisy!r},{r.delta!r}\n")


def read_report(path) -> EvalReport:
    header: dict[str, str] = {}
    records: list[DeltaChrfRecord] = []
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    in_rows = False
    for line in lines:
        if line.startswith("index,"):
            in_rows = True
            continue
        if not in_rows:
            k, v = line.split("=", 1)
            header[k] = v
            continue
        idx, clean, noisy, _delta = line.split(",")
        records.append(DeltaChrfRecord(
            sentence_index=int(idx), chrf_clean=float(clean), chrf_noisy=float(noisy)))
    report = EvalReport(
        model=header["model"],
        noise_kind=header["noise_kind"],
        noise_rate=float(header["noise_rate"]),
        noise_seed=int(header["noise_seed"]),
        test_set=header["test_set"],
        corpus_bleu=float(header["corpus_bleu"]),
        records=records,
    )
    stored_hist = list(map(int, header["delta_histogram"].split(",")))
    if stored_hist != report.delta_histogram:
        raise ValueError(f"{path}: stored histogram disagrees with per-sentence rows")
    return report


def evaluate(model: str, noise_kind: str, noise_rate: float, noise_seed: int,
             test_set: str, clean_hyps: list[str], noisy_hyps: list[str],
             references: list[str],
             params: ChrfParams | None = None) -> EvalReport:
    """Assemble the full report for one (model, noise, test set) triple.

    BLEU is computed on the noisy-input translations against the references;
    the delta records compare them with the clean-input translations.
    """
    records = delta_chrf(clean_hyps, noisy_hyps, references, params)
    return EvalReport(
        model=model, noise_kind=noise_kind, noise_rate=noise_rate,
        noise_seed=noise_seed, test_set=test_set,
        corpus_bleu=corpus_bleu(noisy_hyps, references), records=records)
