"""Transformer encoder / encoder-decoder: forward passes, checkpoints, averaging.

Post-norm residual blocks, sinusoidal (non-learned) positions, residual
dropout only (attention weights are never dropped).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .bpe import BOS_ID
from .corpus import TokenBatch

NEG_INF = np.float32(-1e9)

CHECKPOINT_MAGIC = b"TNMT1\n"


@dataclass
class ModelConfig:
    d_model: int
    n_heads: int
    d_ff: int
    enc_layers: int
    dec_layers: int
    src_vocab_size: int
    tgt_vocab_size: int
    max_positions: int = 512
    dropout_residual: float = 0.1
    dropout_attention: float = 0.0
    share_decoder_io: bool = True
    label_smoothing: float = 0.1
    # When set, positional encodings are re-added before this encoder layer
    # (the stacked-encoder integration puts a fresh stack on top of a
    # pretrained one).
    pe_reapply_layer: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.dropout_attention != 0.0:
            raise ValueError("attention dropout is fixed at 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


PRESETS = {
    "desk": dict(d_model=64, n_heads=4, d_ff=128, enc_layers=2, dec_layers=2,
                 dropout_residual=0.1),
    "tbase": dict(d_model=512, n_heads=8, d_ff=2048, enc_layers=6, dec_layers=6,
                  dropout_residual=0.1),
    "tbig": dict(d_model=1024, n_heads=16, d_ff=4096, enc_layers=6, dec_layers=6,
                 dropout_residual=0.3),
}


def preset_config(name: str, src_vocab_size: int, tgt_vocab_size: int,
                  **overrides) -> ModelConfig:
    """Build a named architecture preset (desk / tbase / tbig) with overrides."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(src_vocab_size=src_vocab_size,
                       tgt_vocab_size=tgt_vocab_size, **kw)


# Parameters are a flat name -> Tensor map; names are the canonical
# serialization order when sorted.
TransformerParams = dict


@dataclass
class Checkpoint:
    config: ModelConfig
    params: TransformerParams
    step: int
    dev_perplexity: float


def sinusoidal_positions(max_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((max_positions, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(np.float32)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(config: ModelConfig, seed: int) -> TransformerParams:
    """Glorot-uniform weights, unit layer-norm gains, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, f = config.d_model, config.d_ff
    params: TransformerParams = {}

    def weight(name, fan_in, fan_out, shape=None):
        params[name] = T.Tensor(
            _glorot(rng, fan_in, fan_out, shape or (fan_in, fan_out)),
            requires_grad=True, name=name)

    def zeros(name, shape):
        params[name] = T.Tensor(np.zeros(shape, dtype=np.float32),
                                requires_grad=True, name=name)

    def ones(name, shape):
        params[name] = T.Tensor(np.ones(shape, dtype=np.float32),
                                requires_grad=True, name=name)

    def attention(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            weight(f"{prefix}.{w}", d, d)
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"{prefix}.{b}", (d,))

    def ffn(prefix):
        weight(f"{prefix}.w1", d, f)
        zeros(f"{prefix}.b1", (f,))
        weight(f"{prefix}.w2", f, d)
        zeros(f"{prefix}.b2", (d,))

    def norm(prefix):
        ones(f"{prefix}.g", (d,))
        zeros(f"{prefix}.b", (d,))

    weight("src_embed", config.src_vocab_size, d, (config.src_vocab_size, d))
    for i in range(config.enc_layers):
        attention(f"enc.{i}.attn")
        norm(f"enc.{i}.ln1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.ln2")

    if config.tgt_vocab_size > 0:
        weight("tgt_embed", config.tgt_vocab_size, d, (config.tgt_vocab_size, d))
        for i in range(config.dec_layers):
            attention(f"dec.{i}.self_attn")
            norm(f"dec.{i}.ln1")
            attention(f"dec.{i}.cross_attn")
            norm(f"dec.{i}.ln2")
            ffn(f"dec.{i}.ffn")
            norm(f"dec.{i}.ln3")
        if not config.share_decoder_io:
            weight("out_proj", config.tgt_vocab_size, d,
                   (config.tgt_vocab_size, d))

    params["pos_enc"] = T.Tensor(
        sinusoidal_positions(config.max_positions, d), name="pos_enc")
    return params


def output_projection(params: TransformerParams, config: ModelConfig) -> T.Tensor:
    """Decoder output projection; aliased to the target embedding when shared."""
    if config.share_decoder_io:
        return params["tgt_embed"]
    return params["out_proj"]


def param_count(config: ModelConfig) -> int:
    """Closed-form count of learned parameters (positions are not learned)."""
    d, f = config.d_model, config.d_ff
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * f + f + f * d + d
    enc_layer = attn + 2 * ln + ffn
    dec_layer = 2 * attn + 3 * ln + ffn
    total = config.src_vocab_size * d + config.enc_layers * enc_layer
    if config.tgt_vocab_size > 0:
        total += config.tgt_vocab_size * d + config.dec_layers * dec_layer
        if not config.share_decoder_io:
            total += config.tgt_vocab_size * d
    return total


def count_params(params: TransformerParams) -> int:
    return sum(p.size for name, p in params.items()
               if name != "pos_enc" and p.requires_grad)


def _seed_mix(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
               .generate_state(1)[0])


def _split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    b, length, d = x.shape
    x = T.reshape(x, (b, length, n_heads, d // n_heads))
    return T.transpose(x, (0, 2, 1, 3))


def _join_heads(x: T.Tensor) -> T.Tensor:
    b, h, length, hd = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, length, h * hd))


def _attention(params, prefix, queries, keys_values, mask_add, n_heads):
    """Multi-head scaled dot-product attention; `mask_add` is an additive
    [B, 1, Lq, Lk] float mask (0 or -1e9)."""

    def proj(x, w, b):
        return T.add(T.matmul(x, params[f"{prefix}.{w}"]), params[f"{prefix}.{b}"])

    q = _split_heads(proj(queries, "wq", "bq"), n_heads)
    k = _split_heads(proj(keys_values, "wk", "bk"), n_heads)
    v = _split_heads(proj(keys_values, "wv", "bv"), n_heads)
    scores = T.scale(T.matmul(q, T.transpose_lastdims(k)),
                     1.0 / np.sqrt(q.shape[-1]))
    scores = T.add(scores, T.Tensor(mask_add))
    weights = T.softmax_lastdim(scores)
    out = _join_heads(T.matmul(weights, v))
    return proj(out, "wo", "bo")


def _ffn(params, prefix, x):
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _sublayer(x, sub_out, params, ln_prefix, p_drop, seed, train):
    dropped = T.dropout(sub_out, p_drop, seed, train)
    return T.layer_norm(T.add(x, dropped),
                        params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"])


def pad_attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """[B, Lk] boolean pad mask -> additive [B, 1, 1, Lk] mask."""
    return np.where(pad_mask[:, None, None, :], NEG_INF, np.float32(0.0))


def causal_attention_mask(length: int) -> np.ndarray:
    """Additive [1, 1, L, L] mask hiding positions after the query."""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, NEG_INF, np.float32(0.0))[None, None]


def _embed(params, config, ids: np.ndarray, embed_name: str) -> T.Tensor:
    length = ids.shape[1]
    if length > config.max_positions:
        raise ValueError(
            f"sequence length {length} exceeds max_positions {config.max_positions}")
    x = T.scale(T.embedding_gather(params[embed_name], ids),
                np.sqrt(config.d_model))
    pe = T.Tensor(params["pos_enc"].data[:length])
    return T.add(x, pe)


def encode(params: TransformerParams, config: ModelConfig, src: TokenBatch,
           train: bool = False, seed: int = 0) -> T.Tensor:
    """Run the encoder stack; returns contextual states [B, L, d_model]."""
    ids = src.ids
    mask_add = pad_attention_mask(src.pad_mask())
    x = _embed(params, config, ids, "src_embed")
    p = config.dropout_residual
    for i in range(config.enc_layers):
        if config.pe_reapply_layer is not None and i == config.pe_reapply_layer and i > 0:
            x = T.add(x, T.Tensor(params["pos_enc"].data[: ids.shape[1]]))
        attn = _attention(params, f"enc.{i}.attn", x, x, mask_add, config.n_heads)
        x = _sublayer(x, attn, params, f"enc.{i}.ln1", p,
                      _seed_mix(seed, 1, i, 0), train)
        ff = _ffn(params, f"enc.{i}.ffn", x)
        x = _sublayer(x, ff, params, f"enc.{i}.ln2", p,
                      _seed_mix(seed, 1, i, 1), train)
    return x


def decode_train(params: TransformerParams, config: ModelConfig,
                 states: T.Tensor, src_pad_mask: np.ndarray,
                 tgt_ids: np.ndarray, train: bool = False,
                 seed: int = 0) -> T.Tensor:
    """Teacher-forced decoder pass; returns logits [B, Lt, tgt_vocab].

    `tgt_ids` is the decoder input (BOS-first). Causal self-attention plus
    cross-attention over `states` with source PAD positions hidden.
    """
    tgt_ids = np.asarray(tgt_ids)
    if tgt_ids.ndim != 2:
        raise ValueError("tgt_ids must be [batch, len]")
    if not np.all(tgt_ids[:, 0] == BOS_ID):
        raise ValueError("decoder input must begin with BOS")
    length = tgt_ids.shape[1]
    causal = causal_attention_mask(length)
    cross_mask = pad_attention_mask(src_pad_mask)
    x = _embed(params, config, tgt_ids, "tgt_embed")
    p = config.dropout_residual
    for i in range(config.dec_layers):
        sa = _attention(params, f"dec.{i}.self_attn", x, x, causal, config.n_heads)
        x = _sublayer(x, sa, params, f"dec.{i}.ln1", p,
                      _seed_mix(seed, 2, i, 0), train)
        ca = _attention(params, f"dec.{i}.cross_attn", x, states, cross_mask,
                        config.n_heads)
        x = _sublayer(x, ca, params, f"dec.{i}.ln2", p,
                      _seed_mix(seed, 2, i, 1), train)
        ff = _ffn(params, f"dec.{i}.ffn", x)
        x = _sublayer(x, ff, params, f"dec.{i}.ln3", p,
                      _seed_mix(seed, 2, i, 2), train)
    proj = output_projection(params, config)
    return T.matmul(x, T.transpose_lastdims(proj))


def nmt_loss(logits: T.Tensor, targets: np.ndarray, label_smoothing: float,
             pad_id: int) -> T.Tensor:
    """Smoothed cross-entropy averaged over non-PAD target tokens.

    `targets` are the decoder inputs shifted left by one (next-token ids).
    """
    targets = np.asarray(targets)
    mask = targets != pad_id
    return T.cross_entropy_with_label_mask(logits, targets, mask, label_smoothing)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def _config_to_text(config: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(config, f.name)
        lines.append(f"{f.name}={'none' if v is None else v}")
    return "\n".join(lines) + "\n"


_CONFIG_PARSERS = {
    "dropout_residual": float,
    "dropout_attention": float,
    "label_smoothing": float,
    "share_decoder_io": lambda v: v == "True",
}


def _config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.strip().splitlines():
        k, v = line.split("=", 1)
        kv[k] = v
    kwargs = {}
    for f in fields(ModelConfig):
        raw = kv[f.name]
        if raw == "none":
            kwargs[f.name] = None
        else:
            kwargs[f.name] = _CONFIG_PARSERS.get(f.name, int)(raw)
    return ModelConfig(**kwargs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary checkpoint: magic, named float32 records in sorted-name order,
    config text block, then step / dev perplexity."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    names = sorted(ckpt.params.keys())
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = ckpt.params[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.data.ndim))
        for dim in t.data.shape:
            buf.write(struct.pack("<I", dim))
        payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        buf.write(payload)
    cfg = _config_to_text(ckpt.config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    tail = f"step={ckpt.step}\ndev_perplexity={ckpt.dev_perplexity!r}\n".encode("utf-8")
    buf.write(struct.pack("<I", len(tail)))
    buf.write(tail)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    view = io.BytesIO(raw)
    magic = view.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
    (n_records,) = struct.unpack("<I", view.read(4))
    params: TransformerParams = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = tuple(struct.unpack("<I", view.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(view.read(4 * count), dtype="<f4").reshape(shape).copy()
        params[name] = T.Tensor(data, requires_grad=(name != "pos_enc"), name=name)
    (cfg_len,) = struct.unpack("<I", view.read(4))
    config = _config_from_text(view.read(cfg_len).decode("utf-8"))
    (tail_len,) = struct.unpack("<I", view.read(4))
    tail = dict(line.split("=", 1)
                for line in view.read(tail_len).decode("utf-8").strip().splitlines())
    if expect_config is not None and config != expect_config:
        raise ValueError(
            f"checkpoint config mismatch:\n  file: {config}\n  expected: {expect_config}")
    return Checkpoint(config=config, params=params, step=int(tail["step"]),
                      dev_perplexity=float(tail["dev_perplexity"]))


def clone_params(params: TransformerParams) -> TransformerParams:
    out: TransformerParams = {}
    for name, t in params.items():
        out[name] = T.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
    return out


def average_params(param_sets: list[TransformerParams]) -> TransformerParams:
    """Element-wise mean (accumulated in float64, stored as float32)."""
    if not param_sets:
        raise ValueError("nothing to average")
    names = sorted(param_sets[0].keys())
    for ps in param_sets[1:]:
        if sorted(ps.keys()) != names:
            raise ValueError("parameter sets disagree on names")
    out: TransformerParams = {}
    for name in names:
        acc = np.zeros(param_sets[0][name].shape, dtype=np.float64)
        for ps in param_sets:
            acc += ps[name].data
        mean = (acc / len(param_sets)).astype(np.float32)
        out[name] = T.Tensor(mean, requires_grad=param_sets[0][name].requires_grad,
                             name=name)
    return out


def average_checkpoints(paths: list) -> TransformerParams:
    ckpts = [load_checkpoint(p) for p in paths]
    first = ckpts[0].config
    for c, p in zip(ckpts[1:], paths[1:]):
        if c.config != first:
            raise ValueError(f"config mismatch between {paths[0]} and {p}")
    return average_params([c.params for c in ckpts])


def select_checkpoints_around_best(ckpts: list[Checkpoint], window: int = 5
                                   ) -> list[Checkpoint]:
    """The `window` checkpoints nearest in step to the lowest-perplexity one."""
    if not ckpts:
        raise ValueError("no checkpoints")
    best = min(ckpts, key=lambda c: (c.dev_perplexity, c.step))
    ranked = sorted(ckpts, key=lambda c: (abs(c.step - best.step), c.step))
    chosen = ranked[: min(window, len(ranked))]
    return sorted(chosen, key=lambda c: c.step)
