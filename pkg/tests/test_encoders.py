import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prodsearch import tensor as T
from prodsearch.encoders import (
    BiGruConfig, BiGruEncoder, EncoderError, GruCellParams, TransformerConfig, TransformerEncoder, bigru_encode,
    gru_cell_step, gru_scan, load_encoder, pad_batch, pooled_encode, transformer_encode,
)
from prodsearch.tensor import Tensor, grad_check


def scalar_gru(x, h, w):
    """Straight-line scalar GRU step; ``w`` holds the nine weights in GATE order."""
    wxr, wxz, wxh, whr, whz, whh, br, bz, bh = w
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    r = sig(x * wxr + h * whr + br)
    z = sig(x * wxz + h * whz + bz)
    c = math.tanh(x * wxh + (r * h) * whh + bh)
    return z * h + (1.0 - z) * c


def cell_from(values, d=1, h=1):
    shapes = [(d, h)] * 3 + [(h, h)] * 3 + [(1, h)] * 3
    return GruCellParams(*[Tensor(np.array(v, dtype=np.float64).reshape(s)) for v, s in zip(values, shapes)])


def step(cell, x, h):
    return gru_cell_step(cell, Tensor(np.array(x, dtype=np.float64)), Tensor(np.array(h, dtype=np.float64))).data


def test_gru_scalar_hand_trace():
    out = step(cell_from([1.0] * 6 + [0.0] * 3), [[1.0]], [[0.0]])
    z = 1 / (1 + math.exp(-1))
    assert out[0, 0] == pytest.approx((1 - z) * math.tanh(1), abs=1e-12)
    assert out[0, 0] == pytest.approx(0.2048, abs=1e-4)


def test_gru_zero_weights_halves_state():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((4, 3))
    cell = cell_from([np.zeros(6)] * 3 + [np.zeros(9)] * 3 + [np.zeros(3)] * 3, d=2, h=3)
    np.testing.assert_array_equal(step(cell, rng.standard_normal((4, 2)), h), 0.5 * h)


def test_gru_saturated_update_gate_keeps_state():
    rng = np.random.default_rng(1)
    vals = [rng.standard_normal(6) for _ in range(3)] + [rng.standard_normal(9) for _ in range(3)]
    vals += [np.zeros(3), np.full(3, 50.0), np.zeros(3)]
    h = rng.standard_normal((2, 3))
    np.testing.assert_allclose(step(cell_from(vals, d=2, h=3), rng.standard_normal((2, 2)), h), h, atol=1e-12)


def test_gru_matches_scalar_oracle_on_random_draws():
    rng = np.random.default_rng(2)
    for _ in range(100):
        w = rng.uniform(-2, 2, 9)
        x, h = rng.uniform(-2, 2, 2)
        assert step(cell_from(w), [[x]], [[h]])[0, 0] == pytest.approx(scalar_gru(x, h, w), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gru_state_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    cell = GruCellParams.init(3, 4, rng, scale=1.0)
    h = rng.uniform(-1, 1, (2, 4))
    x = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
    out = gru_cell_step(cell, x, Tensor(h.astype(np.float32))).data
    # the candidate state is a tanh, so it lies in (-1, 1)
    lo, hi = np.minimum(h, -1.0), np.maximum(h, 1.0)
    assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)


def test_gru_cell_gradients():
    rng = np.random.default_rng(3)
    cell = GruCellParams.init(3, 2, rng, scale=0.8)

    def f(x, h, *ws):
        return gru_cell_step(GruCellParams(*ws), x, h)

    inputs = [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))] + [t.data for t in cell.tensors()]
    rep = grad_check(f, inputs)
    assert rep.passed and len(rep.per_input) == 11


def test_gru_scan_matches_stepwise_cell():
    rng = np.random.default_rng(4)
    cell = GruCellParams.init(3, 4, rng, scale=0.5)
    x = rng.standard_normal((2, 5, 3)).astype(np.float32)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=np.float32)
    fwd = gru_scan(cell, Tensor(x), mask).data
    for b, n in enumerate([5, 3]):
        h = Tensor(np.zeros((1, 4), np.float32))
        for t in range(n):
            h = gru_cell_step(cell, Tensor(x[b : b + 1, t]), h)
            np.testing.assert_allclose(fwd[b, t], h.data[0], atol=1e-6)
        np.testing.assert_allclose(fwd[b, -1], h.data[0], atol=1e-6)  # carried over pads


def test_gru_scan_gradients_with_padding():
    rng = np.random.default_rng(5)
    cell = GruCellParams.init(2, 3, rng, scale=0.8)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=np.float64)
    for reverse in (False, True):
        rep = grad_check(lambda x, *ws: gru_scan(GruCellParams(*ws), x, mask, reverse=reverse),
                         [rng.standard_normal((2, 4, 2))] + [t.data for t in cell.tensors()])
        assert rep.passed, (reverse, rep.max_rel_error)


# ---------------------------------------------------------------- BiGRU


def small_bigru(layers=1, seed=0):
    return BiGruEncoder(BiGruConfig(vocab_size=12, embed_dim=3, hidden_dim=3, out_dim=2, layers=layers,
                                    init_scale=0.5), seed=seed)


def model_grad_check(model, seqs, seed=0):
    names = list(model.named_parameters())
    ids, mask = pad_batch(seqs)

    def f(*ts):
        model.bind(dict(zip(names, ts)))
        return model.encode_padded(ids, mask)

    return grad_check(f, [t.data for t in model.parameters()], seed=seed)


@pytest.mark.parametrize("layers", [1, 2])
def test_bigru_gradients(layers):
    rep = model_grad_check(small_bigru(layers), [[5, 6, 7], [8, 9]])
    assert rep.passed, rep.max_rel_error


def test_bigru_single_token_reads_same_token():
    m = small_bigru()
    hf, hb = m.final_states(np.array([[7]]), np.ones((1, 1), np.float32))
    fwd, bwd = m.cells[0]
    x = T.embedding_lookup(m.embedding, np.array([7]))
    zero = Tensor(np.zeros((1, 3), np.float32))
    np.testing.assert_allclose(hf.data, gru_cell_step(fwd, x, zero).data, atol=1e-6)
    np.testing.assert_allclose(hb.data, gru_cell_step(bwd, x, zero).data, atol=1e-6)


def test_bigru_reversal_swaps_directions():
    m = small_bigru(seed=3)
    swapped = m.copy()
    swapped.cells[0] = (swapped.cells[0][1], swapped.cells[0][0])
    seq = np.array([[3, 9, 4, 11, 6]])
    mask = np.ones(seq.shape, np.float32)
    hf, hb = m.final_states(seq, mask)
    rf, rb = swapped.final_states(seq[:, ::-1].copy(), mask)
    np.testing.assert_allclose(rf.data, hb.data, atol=1e-6)
    np.testing.assert_allclose(rb.data, hf.data, atol=1e-6)


@pytest.mark.parametrize("layers", [1, 2])
def test_bigru_output_dim_and_padding_invariance(layers):
    m = small_bigru(layers)
    alone = bigru_encode(m, [5, 6])
    batch = m.encode([[5, 6], [1, 2, 3, 4, 5, 6, 7]]).data
    assert alone.shape == (2,)
    np.testing.assert_allclose(batch[0], alone, atol=1e-6)


def test_bigru_rejects_empty_and_bad_layers():
    with pytest.raises(EncoderError):
        bigru_encode(small_bigru(), [])
    with pytest.raises(EncoderError):
        BiGruConfig(vocab_size=5, layers=3)


# ---------------------------------------------------------------- transformer


def small_transformer(**kw):
    cfg = dict(vocab_size=10, d_model=4, n_layers=1, n_heads=2, d_ff=6, max_len=6, out_dim=3, init_std=0.5)
    cfg.update(kw)
    return TransformerEncoder(TransformerConfig(**cfg), seed=1)


def test_transformer_gradients():
    m = small_transformer(n_layers=2)
    rep = model_grad_check(m, [[5, 6, 7], [8, 9]])
    assert rep.passed, rep.max_rel_error


@pytest.mark.parametrize("pooling", ["mean", "first"])
def test_transformer_pooling_gradients(pooling):
    rep = model_grad_check(small_transformer(pooling=pooling), [[2, 3, 4, 5]], seed=2)
    assert rep.passed, rep.max_rel_error


def layer_norm_ref(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + eps) * gi + bi for a, gi, bi in zip(v, g, b)]


def gelu_ref(a):
    return 0.5 * a * (1 + math.tanh(math.sqrt(2 / math.pi) * (a + 0.044715 * a ** 3)))


def matvec(v, W):
    return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(W[0]))]


def vadd(a, b):
    return [x + y for x, y in zip(a, b)]


def brute_force_layer(P, ids):
    """Single-head single-layer post-norm encoder, written with Python lists."""
    get = lambda k: P[k].data.astype(np.float64).tolist()
    tok, pos = get("tok_emb"), get("pos_emb")
    xs = [layer_norm_ref(vadd(tok[t], pos[i]), get("emb_ln_g"), get("emb_ln_b")) for i, t in enumerate(ids)]
    q = [vadd(matvec(x, get("layer0.Wq")), get("layer0.bq")) for x in xs]
    k = [vadd(matvec(x, get("layer0.Wk")), get("layer0.bk")) for x in xs]
    v = [vadd(matvec(x, get("layer0.Wv")), get("layer0.bv")) for x in xs]
    out, attn = [], []
    for i in range(len(xs)):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / math.sqrt(len(q[i])) for j in range(len(xs))]
        e = [math.exp(a - max(s)) for a in s]
        w = [a / sum(e) for a in e]
        attn.append(w)
        ctx = [sum(w[j] * v[j][c] for j in range(len(xs))) for c in range(len(v[0]))]
        a = vadd(matvec(ctx, get("layer0.Wo")), get("layer0.bo"))
        x1 = layer_norm_ref(vadd(xs[i], a), get("layer0.ln1_g"), get("layer0.ln1_b"))
        hdn = [gelu_ref(u) for u in vadd(matvec(x1, get("layer0.W1")), get("layer0.b1"))]
        ff = vadd(matvec(hdn, get("layer0.W2")), get("layer0.b2"))
        out.append(layer_norm_ref(vadd(x1, ff), get("layer0.ln2_g"), get("layer0.ln2_b")))
    return np.array(out), np.array(attn)


def test_attention_matches_brute_force():
    m = small_transformer(n_heads=1)
    ids = [3, 7, 1, 9]
    res = transformer_encode(m, ids)
    want, attn = brute_force_layer(m.params, ids)
    np.testing.assert_allclose(res.hidden.data[0], want, atol=1e-5)
    np.testing.assert_allclose(res.attention[0][0, 0], attn, atol=1e-5)


def test_attention_rows_sum_to_one_and_skip_pads():
    m = small_transformer()
    res = transformer_encode(m, [[4, 5, 6, 0], [4, 5, 0, 0]], attention_mask=[[1, 1, 1, 0], [1, 1, 0, 0]])
    probs = res.attention[0]
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
    assert probs[1, :, :, 2:].max() < 1e-12


def test_pad_suffix_does_not_change_real_tokens():
    m = small_transformer()
    a = transformer_encode(m, [[4, 5, 6, 0, 0]], attention_mask=[[1, 1, 1, 0, 0]]).hidden.data[0, :3]
    b = transformer_encode(m, [[4, 5, 6, 8, 2]], attention_mask=[[1, 1, 1, 0, 0]]).hidden.data[0, :3]
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(5, 9), min_size=1, max_size=5), st.integers(1, 5))
def test_pooled_embedding_padding_invariant(seq, extra):
    m = small_transformer()
    alone = pooled_encode(m, seq)
    with T.no_grad():
        batch = m.encode([seq, [5] * min(len(seq) + extra, 6)]).data
    assert alone.shape == (3,)
    np.testing.assert_allclose(batch[0], alone, atol=1e-5)


def test_identical_states_pool_to_themselves():
    h = np.tile(np.arange(4.0), (1, 3, 1))
    pooled = T.mean_pool(Tensor(h), np.ones((1, 3)))
    np.testing.assert_array_equal(pooled.data[0], np.arange(4.0))


def test_overlength_input_is_truncated_with_flag():
    m = small_transformer()
    res = transformer_encode(m, list(range(5, 10)) * 2)
    assert res.truncated and res.hidden.shape[1] == 6


def test_zero_mlm_head_gives_uniform_loss():
    m = small_transformer()
    m.params["mlm.W"].data[:] = 0.0
    out = m.forward(np.array([[5, 6, 7]]), np.ones((1, 3), np.float32))
    logits = m.mlm_logits(out.hidden, np.array([0, 2]))
    assert logits.shape == (2, 10)
    assert T.cross_entropy(logits, [5, 7]).item() == pytest.approx(math.log(10), rel=1e-6)


def test_heads_must_divide_model_width():
    with pytest.raises(EncoderError):
        TransformerConfig(vocab_size=10, d_model=6, n_heads=4)


@pytest.mark.parametrize("make", [small_bigru, small_transformer])
def test_checkpoint_round_trip(tmp_path, make):
    m = make()
    m.tokenizer_hash = "abc"
    m.save(tmp_path / "m.psa")
    again = load_encoder(tmp_path / "m.psa")
    assert again.arch_hash() == m.arch_hash() and again.tokenizer_hash == "abc"
    assert (tmp_path / "m.json").exists()
    with T.no_grad():
        np.testing.assert_array_equal(again.encode([[5, 6]]).data, m.encode([[5, 6]]).data)
