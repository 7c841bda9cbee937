"""NMT model construction under four encoder-integration strategies,
training with a trainable-parameter mask, and beam-search decoding."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .bpe import BOS_ID, EOS_ID, PAD_ID, BpeModel
from .corpus import ParallelPair, TokenBatch, batch_index_groups
from .pretrain import DivergenceError, LrSchedule, _seed_mix
from .transformer import (
    Checkpoint,
    ModelConfig,
    TransformerParams,
    clone_params,
    decode_train,
    encode,
    init_params,
    nmt_loss,
)

log = logging.getLogger("nmtlab")

BASELINE = "baseline"
EMB = "emb"
FT = "ft"
FREEZE = "freeze"

STRATEGY_KINDS = (BASELINE, EMB, FT, FREEZE)


@dataclass
class IntegrationStrategy:
    """How a pretrained encoder checkpoint enters the NMT model.

    `finetune_bert` only matters for EMB, where the pretrained stack defaults
    to being fine-tuned along with the rest of the model.
    """

    kind: str
    bert_checkpoint: Checkpoint | None = None
    finetune_bert: bool = True

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGY_KINDS}")
        if self.kind != BASELINE and self.bert_checkpoint is None:
            raise ValueError(f"strategy {self.kind!r} requires a pretrained checkpoint")


@dataclass
class NmtModel:
    config: ModelConfig
    params: TransformerParams
    # False entries stay bit-identical through any number of training steps.
    trainable_mask: dict[str, bool] = field(default_factory=dict)

    def trainable(self, name: str) -> bool:
        return self.trainable_mask.get(name, True) and name != "pos_enc"


@dataclass
class BeamConfig:
    beam_size: int = 4
    length_penalty_alpha: float = 0.6
    max_output_len: int = 100

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")

    def penalty(self, length: int) -> float:
        return ((5.0 + length) / 6.0) ** self.length_penalty_alpha


def _check_compatible(bert: Checkpoint, nmt_config: ModelConfig,
                      same_depth: bool) -> None:
    bc = bert.config
    if bc.d_model != nmt_config.d_model:
        raise ValueError(
            f"d_model mismatch: pretrained {bc.d_model} vs NMT {nmt_config.d_model}")
    if bc.src_vocab_size != nmt_config.src_vocab_size:
        raise ValueError(
            f"source vocab mismatch: pretrained {bc.src_vocab_size} "
            f"vs NMT {nmt_config.src_vocab_size}")
    if bc.n_heads != nmt_config.n_heads or bc.d_ff != nmt_config.d_ff:
        raise ValueError("pretrained encoder geometry (heads/d_ff) differs from NMT config")
    if same_depth and bc.enc_layers != nmt_config.enc_layers:
        raise ValueError(
            f"encoder depth mismatch: pretrained {bc.enc_layers} "
            f"vs NMT {nmt_config.enc_layers}")


def _copy_encoder(dst: TransformerParams, src_ckpt: Checkpoint,
                  n_layers: int) -> list[str]:
    copied = ["src_embed"]
    dst["src_embed"].data[...] = src_ckpt.params["src_embed"].data
    for name, p in src_ckpt.params.items():
        if name.startswith("enc."):
            layer = int(name.split(".")[1])
            if layer < n_layers:
                dst[name].data[...] = p.data
                copied.append(name)
    return copied


def build_model(strategy: IntegrationStrategy, nmt_config: ModelConfig,
                seed: int) -> NmtModel:
    """Construct the NMT model for a strategy.

    baseline: random init. ft: encoder + source embedding copied from the
    pretrained checkpoint, everything trainable. freeze: same copy, the copied
    stack frozen. emb: the pretrained stack becomes the lower encoder half
    with a fresh nmt-config encoder stacked on top (positions re-applied at
    the seam), decoder random.
    """
    if strategy.kind == BASELINE:
        params = init_params(nmt_config, seed)
        return NmtModel(config=nmt_config, params=params)

    bert = strategy.bert_checkpoint
    if strategy.kind in (FT, FREEZE):
        _check_compatible(bert, nmt_config, same_depth=True)
        params = init_params(nmt_config, seed)
        copied = _copy_encoder(params, bert, nmt_config.enc_layers)
        mask = {}
        if strategy.kind == FREEZE:
            mask = {name: False for name in copied}
            for name in copied:
                params[name].requires_grad = False
        return NmtModel(config=nmt_config, params=params, trainable_mask=mask)

    # EMB: combined encoder = pretrained lower stack + configured top stack.
    _check_compatible(bert, nmt_config, same_depth=False)
    lower = bert.config.enc_layers
    combined = replace(
        nmt_config,
        enc_layers=lower + nmt_config.enc_layers,
        pe_reapply_layer=lower,
    )
    params = init_params(combined, seed)
    copied = _copy_encoder(params, bert, lower)
    mask = {}
    if not strategy.finetune_bert:
        mask = {name: False for name in copied}
        for name in copied:
            params[name].requires_grad = False
    return NmtModel(config=combined, params=params, trainable_mask=mask)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def encode_pairs(pairs: list[ParallelPair], src_bpe: BpeModel,
                 tgt_bpe: BpeModel) -> list[tuple[list[int], list[int]]]:
    """Token-id views of parallel pairs: source gets EOS, target BOS..EOS."""
    out = []
    for p in pairs:
        src = src_bpe.apply(p.source) + [EOS_ID]
        tgt = [BOS_ID] + tgt_bpe.apply(p.reference) + [EOS_ID]
        out.append((src, tgt))
    return out


def _pair_batches(encoded, token_budget, max_len, seed):
    costs = [max(len(s), len(t)) for s, t in encoded]
    groups = batch_index_groups(costs, token_budget, max_len, seed)
    batches = []
    for group in groups:
        src = TokenBatch.from_sequences([encoded[i][0] for i in group], PAD_ID)
        tgt = TokenBatch.from_sequences([encoded[i][1] for i in group], PAD_ID)
        batches.append((src, tgt))
    return batches


def dev_perplexity(model: NmtModel, dev_batches) -> float:
    """exp(mean unsmoothed cross-entropy per non-PAD target token), eval mode."""
    ce_sum = 0.0
    tokens = 0
    with T.no_grad():
        for src, tgt in dev_batches:
            tgt_in = tgt.ids[:, :-1]
            tgt_out = tgt.ids[:, 1:]
            states = encode(model.params, model.config, src, train=False)
            logits = decode_train(model.params, model.config, states,
                                  src.pad_mask(), tgt_in, train=False)
            n = int((tgt_out != PAD_ID).sum())
            loss = nmt_loss(logits, tgt_out, 0.0, PAD_ID)
            ce_sum += loss.item() * n
            tokens += n
    return float(np.exp(ce_sum / max(tokens, 1)))


def train_nmt(
    model: NmtModel,
    pairs: list[ParallelPair],
    src_bpe: BpeModel,
    tgt_bpe: BpeModel,
    schedule: LrSchedule,
    token_budget: int,
    steps: int,
    seed: int,
    dropout_residual: float = 0.3,
    max_len: int = 250,
    dev_pairs: list[ParallelPair] | None = None,
    dev_fraction: float = 0.01,
    ckpt_every: int = 200,
    label_smoothing: float | None = None,
    log_path=None,
) -> list[Checkpoint]:
    """Train in place, returning periodic checkpoints (ordered by step) with
    dev perplexity recorded. Non-trainable parameters are never updated."""
    config = replace(model.config, dropout_residual=dropout_residual)
    smoothing = config.label_smoothing if label_smoothing is None else label_smoothing
    encoded = encode_pairs(pairs, src_bpe, tgt_bpe)
    kept = [(s, t) for s, t in encoded if len(s) <= max_len and len(t) <= max_len]
    if len(kept) < len(encoded):
        log.info("dropped_long=%d dropped_empty=0", len(encoded) - len(kept))
    if dev_pairs is not None:
        dev_encoded = encode_pairs(dev_pairs, src_bpe, tgt_bpe)
        train_encoded = kept
    else:
        rng = np.random.Generator(np.random.PCG64(_seed_mix(seed, 41)))
        order = rng.permutation(len(kept))
        n_dev = max(1, int(round(dev_fraction * len(kept))))
        dev_ids = set(int(i) for i in order[:n_dev])
        dev_encoded = [kept[i] for i in sorted(dev_ids)]
        train_encoded = [kept[i] for i in range(len(kept)) if i not in dev_ids]
    if not train_encoded:
        raise ValueError("no training pairs left after filtering")
    dev_batches = _pair_batches(dev_encoded, token_budget, max_len,
                                _seed_mix(seed, 43))

    state = T.AdamState()
    log_rows = []
    ckpts = [Checkpoint(config=model.config, params=clone_params(model.params),
                        step=0, dev_perplexity=dev_perplexity(model, dev_batches))]

    step = 0
    epoch = 0
    done = steps == 0
    while not done:
        batches = _pair_batches(train_encoded, token_budget, max_len,
                                _seed_mix(seed, 47, epoch))
        for src, tgt in batches:
            step += 1
            lr = schedule.lr(step)
            tgt_in = tgt.ids[:, :-1]
            tgt_out = tgt.ids[:, 1:]
            try:
                states = encode(model.params, config, src, train=True,
                                seed=_seed_mix(seed, 53, step, 0))
                logits = decode_train(model.params, config, states,
                                      src.pad_mask(), tgt_in, train=True,
                                      seed=_seed_mix(seed, 53, step, 1))
                loss = nmt_loss(logits, tgt_out, smoothing, PAD_ID)
                grads = T.backward(loss)
            except T.NumericsError as e:
                raise DivergenceError(f"NMT training diverged at step {step}: {e}")
            name_grads = {p.name: g for p, g in grads.items()
                          if p.name is not None and model.trainable(p.name)}
            T.adam_step(model.params, name_grads, state, lr)

            if step % ckpt_every == 0 or step == steps:
                ppl = dev_perplexity(model, dev_batches)
                ckpts.append(Checkpoint(config=model.config,
                                        params=clone_params(model.params),
                                        step=step, dev_perplexity=ppl))
                log_rows.append(f"{step}\t{lr:.6g}\t{loss.item():.6g}\t{ppl:.6g}")
            if step >= steps:
                done = True
                break
        epoch += 1

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as f:
            f.write("step\tlr\tloss\tdev_ppl\n")
            f.write("\n".join(log_rows) + ("\n" if log_rows else ""))
    return ckpts


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass(order=True)
class _Hyp:
    neg_score: float
    tokens: tuple[int, ...]


def beam_search(model: NmtModel, src: str, src_bpe: BpeModel, tgt_bpe: BpeModel,
                beam: BeamConfig) -> str:
    """Length-penalised beam search over the target vocabulary.

    Hypothesis score is cumulative log-probability divided by the GNMT
    penalty ((5+|Y|)/6)^alpha, |Y| counting generated tokens including EOS.
    Ties break toward lexicographically smaller token sequences.
    """
    if not src.strip():
        return ""
    tokens = beam_search_ids(model, src_bpe.apply(src) + [EOS_ID], beam)
    return tgt_bpe.decode(list(tokens))


def beam_search_ids(model: NmtModel, src_ids: list[int],
                    beam: BeamConfig) -> tuple[int, ...]:
    """Beam search over raw token ids; returns generated ids without BOS/EOS."""
    params, config = model.params, model.config
    with T.no_grad():
        src_batch = TokenBatch.from_sequences([src_ids], PAD_ID)
        states = encode(params, config, src_batch, train=False)
        src_pad = src_batch.pad_mask()

        # live: (cumulative logprob, generated tokens); finished: _Hyp list
        live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        finished: list[_Hyp] = []
        for _ in range(beam.max_output_len):
            width = len(live[0][1]) + 1
            tile = np.repeat(states.data, len(live), axis=0)
            tgt_in = np.array([(BOS_ID,) + toks for _, toks in live], dtype=np.int64)
            logits = decode_train(
                params, config, T.Tensor(tile),
                np.repeat(src_pad, len(live), axis=0), tgt_in, train=False)
            candidates: list[tuple[float, tuple[int, ...]]] = []
            for (lp, toks), row in zip(live, logits.data[:, -1, :]):
                logprobs = _log_softmax(row.astype(np.float64))
                for tok in range(logprobs.shape[0]):
                    candidates.append((lp + float(logprobs[tok]), toks + (tok,)))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            # only the top beam_size candidates survive; EOS-enders among them
            # finish their beam (beam 1 therefore reduces to greedy exactly)
            next_live = []
            for lp, toks in candidates[: beam.beam_size]:
                if toks[-1] == EOS_ID:
                    finished.append(_Hyp(-lp / beam.penalty(len(toks)), toks))
                else:
                    next_live.append((lp, toks))
            live = next_live
            if not live:
                break
            if width >= beam.max_output_len:
                for lp, toks in live:
                    finished.append(_Hyp(-lp / beam.penalty(len(toks)), toks))
                break
        if not finished:
            finished = [_Hyp(-lp / beam.penalty(max(len(toks), 1)), toks)
                        for lp, toks in live]
    best = min(finished)
    toks = best.tokens
    return toks[:-1] if toks and toks[-1] == EOS_ID else toks


def greedy_ids(model: NmtModel, src_ids: list[int], max_len: int) -> tuple[int, ...]:
    """Plain argmax decoding; used as the beam-1 reference."""
    params, config = model.params, model.config
    with T.no_grad():
        src_batch = TokenBatch.from_sequences([src_ids], PAD_ID)
        states = encode(params, config, src_batch, train=False)
        toks: tuple[int, ...] = ()
        for _ in range(max_len):
            tgt_in = np.array([(BOS_ID,) + toks], dtype=np.int64)
            logits = decode_train(params, config, states, src_batch.pad_mask(),
                                  tgt_in, train=False)
            tok = int(logits.data[0, -1].argmax())
            toks = toks + (tok,)
            if tok == EOS_ID:
                break
    return toks[:-1] if toks and toks[-1] == EOS_ID else toks


def translate_file(ckpt: Checkpoint, src_bpe: BpeModel, tgt_bpe: BpeModel,
                   beam: BeamConfig, in_path, out_path, threads: int = 1) -> dict:
    """Translate a file line-by-line (line-aligned output, blank in -> blank out).

    Sentences are independent, so decoding parallelises across lines; results
    are written in input order either way.
    """
    model = NmtModel(config=ckpt.config, params=ckpt.params)
    with open(in_path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    start = time.perf_counter()

    def decode_one(line: str) -> str:
        return beam_search(model, line, src_bpe, tgt_bpe, beam)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(decode_one, lines))
    else:
        outputs = [decode_one(ln) for ln in lines]
    elapsed = time.perf_counter() - start
    with open(out_path, "w", encoding="utf-8") as f:
        for out in outputs:
            f.write(out + "\n")
    n_tokens = sum(len(tgt_bpe.apply(out)) for out in outputs)
    stats = {"sentences": len(lines), "tokens": n_tokens, "sec": elapsed}
    log.info("sentences=%d tokens=%d sec=%.3f", len(lines), n_tokens, elapsed)
    return stats
