import math
import os

import numpy as np
import pytest

from nmtlab import tensor as T
from nmtlab.corpus import TokenBatch
from nmtlab.transformer import (
    Checkpoint,
    ModelConfig,
    average_checkpoints,
    average_params,
    clone_params,
    count_params,
    decode_train,
    encode,
    init_params,
    load_checkpoint,
    nmt_loss,
    param_count,
    preset_config,
    save_checkpoint,
    select_checkpoints_around_best,
    sinusoidal_positions,
)

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def tiny_config(**kw):
    base = dict(d_model=16, n_heads=4, d_ff=32, enc_layers=2, dec_layers=2,
                src_vocab_size=11, tgt_vocab_size=13, max_positions=32,
                dropout_residual=0.1)
    base.update(kw)
    return ModelConfig(**base)


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        tiny_config(d_model=10, n_heads=4)


def test_config_rejects_attention_dropout():
    with pytest.raises(ValueError):
        tiny_config(dropout_attention=0.1)


def test_init_deterministic():
    a = init_params(tiny_config(), seed=5)
    b = init_params(tiny_config(), seed=5)
    assert sorted(a) == sorted(b)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)


def test_init_layer_norm_gains_are_ones():
    params = init_params(tiny_config(), seed=0)
    for name, p in params.items():
        if name.endswith("ln1.g") or name.endswith("ln2.g") or name.endswith("ln3.g"):
            assert np.array_equal(p.data, np.ones_like(p.data))


def test_embedding_variance_near_glorot_target():
    cfg = tiny_config(d_model=64, n_heads=4, src_vocab_size=80)
    params = init_params(cfg, seed=3)
    emb = params["src_embed"].data
    target = 2.0 / (cfg.src_vocab_size + cfg.d_model)
    assert abs(emb.var() - target) / target < 0.10


def test_param_count_matches_closed_form():
    for preset in ("desk", "tbase", "tbig"):
        cfg = preset_config(preset, src_vocab_size=50, tgt_vocab_size=60)
        params = init_params(cfg, seed=0)
        assert count_params(params) == param_count(cfg)
    cfg = tiny_config(share_decoder_io=False)
    assert count_params(init_params(cfg, seed=0)) == param_count(cfg)


def test_encode_zero_layers_is_scaled_embedding_plus_positions():
    cfg = tiny_config(enc_layers=0)
    params = init_params(cfg, seed=1)
    batch = TokenBatch.from_sequences([[4, 5, 6, 7]], pad_id=0)
    out = encode(params, cfg, batch)
    expected = (params["src_embed"].data[[4, 5, 6, 7]] * math.sqrt(cfg.d_model)
                + sinusoidal_positions(cfg.max_positions, cfg.d_model)[:4])
    assert np.allclose(out.data[0], expected, atol=1e-6)


def test_encode_batch_permutation_equivariance():
    cfg = tiny_config()
    params = init_params(cfg, seed=2)
    seqs = [[4, 5, 6], [7, 8, 9], [10, 4, 5]]
    batch = TokenBatch.from_sequences(seqs, pad_id=0)
    out = encode(params, cfg, batch)
    perm = [2, 0, 1]
    batch_p = TokenBatch.from_sequences([seqs[i] for i in perm], pad_id=0)
    out_p = encode(params, cfg, batch_p)
    assert np.allclose(out_p.data, out.data[perm], atol=1e-6)


def test_encode_pad_positions_do_not_leak():
    cfg = tiny_config()
    params = init_params(cfg, seed=4)
    a = TokenBatch.from_sequences([[4, 5, 6], [7, 8]], pad_id=0)
    states_a = encode(params, cfg, a)
    # change the PAD slot's id directly: non-PAD outputs must not move
    ids = a.ids.copy()
    ids[1, 2] = 9
    b = TokenBatch(ids=ids, lengths=a.lengths, pad_id=0)
    # pad_mask derives from ids; force the original mask by monkeypatching
    b.pad_mask = a.pad_mask
    states_b = encode(params, cfg, b)
    assert np.abs(states_b.data[0] - states_a.data[0]).max() < 1e-6
    assert np.abs(states_b.data[1, :2] - states_a.data[1, :2]).max() < 1e-6


def test_encode_rejects_overlong_sequence():
    cfg = tiny_config(max_positions=4)
    params = init_params(cfg, seed=0)
    batch = TokenBatch.from_sequences([[4, 5, 6, 7, 8]], pad_id=0)
    with pytest.raises(ValueError):
        encode(params, cfg, batch)


def test_decoder_causality():
    cfg = tiny_config()
    params = init_params(cfg, seed=6)
    src = TokenBatch.from_sequences([[4, 5, 6]], pad_id=0)
    states = encode(params, cfg, src)
    tgt = np.array([[2, 5, 6, 7, 8]])
    logits = decode_train(params, cfg, states, src.pad_mask(), tgt)
    tgt2 = tgt.copy()
    tgt2[0, 4] = 11  # beyond position 3
    logits2 = decode_train(params, cfg, states, src.pad_mask(), tgt2)
    assert np.allclose(logits.data[0, :4], logits2.data[0, :4], atol=1e-6)
    assert not np.allclose(logits.data[0, 4], logits2.data[0, 4], atol=1e-6)


def test_decoder_requires_bos():
    cfg = tiny_config()
    params = init_params(cfg, seed=6)
    src = TokenBatch.from_sequences([[4]], pad_id=0)
    states = encode(params, cfg, src)
    with pytest.raises(ValueError):
        decode_train(params, cfg, states, src.pad_mask(), np.array([[5, 6]]))


def test_decoder_zero_layers_shared_io_gives_similarity_scores():
    cfg = tiny_config(dec_layers=0, share_decoder_io=True)
    params = init_params(cfg, seed=7)
    src = TokenBatch.from_sequences([[4, 5]], pad_id=0)
    states = encode(params, cfg, src)
    tgt = np.array([[2, 6, 7]])
    logits = decode_train(params, cfg, states, src.pad_mask(), tgt)
    emb = params["tgt_embed"].data
    x = emb[tgt] * math.sqrt(cfg.d_model) + sinusoidal_positions(32, cfg.d_model)[:3]
    assert np.allclose(logits.data, x @ emb.T, atol=1e-5)


def test_golden_logits_regression():
    golden = np.load(os.path.join(DATA_DIR, "golden_logits.npz"))
    cfg = tiny_config()
    params = init_params(cfg, seed=int(golden["seed"]))
    src = TokenBatch.from_sequences([list(map(int, s)) for s in golden["src"]], pad_id=0)
    states = encode(params, cfg, src)
    logits = decode_train(params, cfg, states, src.pad_mask(), golden["tgt"])
    assert np.abs(logits.data - golden["logits"]).max() < 1e-5


def test_nmt_loss_perfect_logits():
    v = 13
    targets = np.array([[5, 6, 3]])
    logits = np.full((1, 3, v), -40.0, dtype=np.float32)
    logits[0, np.arange(3), targets[0]] = 40.0
    loss = nmt_loss(T.Tensor(logits), targets, 0.0, pad_id=0)
    assert loss.item() < 1e-6


def test_nmt_loss_uniform_logits():
    v = 13
    targets = np.array([[5, 6, 3, 0]])  # trailing PAD excluded
    logits = T.Tensor(np.zeros((1, 4, v), dtype=np.float32))
    loss = nmt_loss(logits, targets, 0.0, pad_id=0)
    assert abs(loss.item() - math.log(v)) < 1e-6


def test_nmt_loss_smoothing_hand_case():
    # single position, 3 classes, logits [0.5, -1, 2], target 0, smoothing 0.1
    z = [0.5, -1.0, 2.0]
    lse = math.log(sum(math.exp(x) for x in z))
    logp = [x - lse for x in z]
    expected = -(0.9 * logp[0] + 0.05 * (logp[1] + logp[2]))
    loss = nmt_loss(T.Tensor(np.array([[z]], dtype=np.float32)),
                    np.array([[0]]), 0.1, pad_id=9)
    assert abs(loss.item() - expected) < 1e-6


def test_shared_embedding_stays_aliased_after_adam():
    cfg = tiny_config(share_decoder_io=True)
    params = init_params(cfg, seed=8)
    src = TokenBatch.from_sequences([[4, 5, 6]], pad_id=0)
    states = encode(params, cfg, src, train=True, seed=1)
    tgt_in = np.array([[2, 5, 6]])
    tgt_out = np.array([[5, 6, 3]])
    logits = decode_train(params, cfg, states, src.pad_mask(), tgt_in, train=True, seed=2)
    grads = T.backward(nmt_loss(logits, tgt_out, 0.1, pad_id=0))
    name_grads = {p.name: g for p, g in grads.items()}
    T.adam_step(params, name_grads, T.AdamState(), lr=0.01)
    # same storage: the output projection IS the target embedding
    from nmtlab.transformer import output_projection
    assert "out_proj" not in params
    assert output_projection(params, cfg) is params["tgt_embed"]


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config()
    ck = Checkpoint(cfg, init_params(cfg, seed=9), step=42, dev_perplexity=7.125)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    assert loaded.step == 42 and loaded.dev_perplexity == 7.125
    assert loaded.config == cfg
    for name in ck.params:
        assert np.array_equal(loaded.params[name].data, ck.params[name].data)


def test_checkpoint_mismatch_error_names_configs(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(cfg, init_params(cfg, seed=1), 0, 1.0), path)
    other = tiny_config(enc_layers=3)
    with pytest.raises(ValueError, match="enc_layers=2") as e:
        load_checkpoint(path, expect_config=other)
    assert "enc_layers=3" in str(e.value)


def test_checkpoint_bytes_stable_across_saves(tmp_path):
    cfg = tiny_config()
    ck = Checkpoint(cfg, init_params(cfg, seed=10), step=3, dev_perplexity=2.5)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ck, p1)
    save_checkpoint(ck, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_average_of_identical_checkpoints_is_identity():
    cfg = tiny_config()
    params = init_params(cfg, seed=11)
    avg = average_params([params, clone_params(params), clone_params(params)])
    for name in params:
        assert np.array_equal(avg[name].data, params[name].data)


def test_average_of_theta_and_minus_theta_is_zero():
    cfg = tiny_config()
    a = init_params(cfg, seed=12)
    b = clone_params(a)
    for name in b:
        b[name].data = -b[name].data
    avg = average_params([a, b])
    for name in avg:
        assert np.abs(avg[name].data).max() == 0.0


def test_average_matches_elementwise_oracle(tmp_path):
    cfg = tiny_config()
    paths = []
    sets = []
    for i in range(5):
        params = init_params(cfg, seed=100 + i)
        sets.append(params)
        p = tmp_path / f"c{i}.ckpt"
        save_checkpoint(Checkpoint(cfg, params, i, 1.0 + i), p)
        paths.append(p)
    avg = average_checkpoints(paths)
    for name in avg:
        oracle = np.mean(np.stack([s[name].data.astype(np.float64) for s in sets]),
                         axis=0).astype(np.float32)
        assert np.abs(avg[name].data - oracle).max() < 1e-7


def test_average_rejects_config_mismatch(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(Checkpoint(tiny_config(), init_params(tiny_config(), 1), 0, 1.0), a)
    other = tiny_config(d_ff=64)
    save_checkpoint(Checkpoint(other, init_params(other, 1), 0, 1.0), b)
    with pytest.raises(ValueError):
        average_checkpoints([a, b])


def test_select_checkpoints_around_best():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    ckpts = [Checkpoint(cfg, params, step=s, dev_perplexity=p)
             for s, p in [(100, 9.0), (200, 5.0), (300, 3.0), (400, 4.0),
                          (500, 6.0), (600, 8.0), (700, 9.5)]]
    window = select_checkpoints_around_best(ckpts, 5)
    assert [c.step for c in window] == [100, 200, 300, 400, 500]
