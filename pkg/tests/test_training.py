import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prodsearch import tensor as T
from prodsearch.bpe import train_bpe
from prodsearch.encoders import BiGruConfig, BiGruEncoder, TransformerConfig, TransformerEncoder
from prodsearch.tensor import Tensor, grad_check
from prodsearch.training import (
    FinetuneConfig, GruTrainConfig, NumericalError, OptimizerState, PretrainConfig, RunLog, StlrSchedule,
    TokenCache, TokenizerMismatch, TrainingConfigError, TripletLossConfig, adam_step, adamw_step, fill_mask,
    fill_mask_accuracy, finetune, mean_triplet_loss, perplexity_from_logprobs, pretrain_mlm, pseudo_perplexity,
    stlr, train_gru, triplet_loss,
)


def unit(cos):
    return [cos, math.sqrt(1 - cos * cos)]


def loss_of(cos_ap, cos_an, margin=0.5):
    a = Tensor(np.array([[1.0, 0.0]]))
    return triplet_loss(a, Tensor(np.array([unit(cos_ap)])), Tensor(np.array([unit(cos_an)])),
                        TripletLossConfig(margin)).item()


def test_triplet_hinge_arithmetic():
    assert loss_of(0.8, 0.1) == pytest.approx(0.0, abs=1e-12)  # d_ap 0.2, d_an 0.9
    assert loss_of(0.2, 0.7) == pytest.approx(1.0, abs=1e-12)  # d_ap 0.8, d_an 0.3


def test_identical_positive_and_negative_cost_margin_each():
    rng = np.random.default_rng(0)
    a, p = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    assert triplet_loss(Tensor(a), Tensor(p), Tensor(p.copy())).item() == pytest.approx(6 * 0.5)


def test_negative_margin_rejected():
    with pytest.raises(TrainingConfigError):
        TripletLossConfig(-0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_triplet_loss_nonnegative_and_inactive_items_have_no_gradient(seed, margin):
    rng = np.random.default_rng(seed)
    a, p, n = (Tensor(rng.standard_normal((5, 3)), requires_grad=True) for _ in range(3))
    loss = triplet_loss(a, p, n, TripletLossConfig(margin))
    assert loss.item() >= 0.0
    T.backward(loss)
    cos = lambda x, y: (x * y).sum(1) / np.linalg.norm(x, axis=1) / np.linalg.norm(y, axis=1)
    inactive = (1 - cos(a.data, p.data)) - (1 - cos(a.data, n.data)) + margin < 0
    np.testing.assert_array_equal(n.grad[inactive], 0.0)


def test_triplet_loss_gradient():
    rng = np.random.default_rng(1)
    rep = grad_check(lambda a, p, n: triplet_loss(a, p, n, TripletLossConfig(1.5)),
                     [rng.standard_normal((4, 3)) for _ in range(3)])
    assert rep.passed


# ---------------------------------------------------------------- perplexity


def tiny_transformer(vocab_size, **kw):
    cfg = dict(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=16, out_dim=8)
    cfg.update(kw)
    return TransformerEncoder(TransformerConfig(vocab_size, **cfg), seed=0)


def test_uniform_model_has_perplexity_vocab_size():
    m = tiny_transformer(30)
    m.params["mlm.W"].data[:] = 0.0
    score = pseudo_perplexity(m, [[5, 6, 7], [8, 9]])
    assert score.n_tokens == 5
    assert score.perplexity == pytest.approx(30.0, rel=1e-6)


def test_perfect_model_and_empty_stream():
    assert perplexity_from_logprobs([0.0, 0.0, 0.0]).perplexity == 1.0
    with pytest.raises(TrainingConfigError):
        perplexity_from_logprobs([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20.0, 0.0), min_size=1, max_size=20))
def test_perplexity_at_least_one(logprobs):
    assert perplexity_from_logprobs(logprobs).perplexity >= 1.0


def test_fresh_model_perplexity_near_vocab_size():
    m = tiny_transformer(200, init_std=0.02)
    ppl = pseudo_perplexity(m, [[5, 6, 7, 8], [9, 10, 11]]).perplexity
    assert 100 <= ppl <= 400


# ---------------------------------------------------------------- optimizers


def params(*arrays):
    return [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]


def test_adam_zero_gradient_is_noop():
    ps = params([1.0, -2.0])
    st_ = OptimizerState.for_params(ps, lr=0.1)
    adam_step(ps, [np.zeros(2)], st_)
    np.testing.assert_array_equal(ps[0].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    ps = params([1.0, -2.0, 0.5])
    st_ = OptimizerState.for_params(ps, lr=0.01)
    adam_step(ps, [np.array([3.0, -0.2, 7.0])], st_)
    np.testing.assert_allclose(ps[0].data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-8)


def test_adamw_decay_without_gradient():
    ps = params([2.0, -4.0])
    st_ = OptimizerState.for_params(ps, lr=0.1, weight_decay=0.5)
    adamw_step(ps, [np.zeros(2)], st_)
    np.testing.assert_allclose(ps[0].data, [2.0 * 0.95, -4.0 * 0.95])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_optimizer_steps_keep_shapes_and_finiteness(seed):
    rng = np.random.default_rng(seed)
    ps = params(rng.standard_normal((3, 2)), rng.standard_normal(4))
    st_ = OptimizerState.for_params(ps, lr=0.05, weight_decay=0.01)
    for _ in range(5):
        adamw_step(ps, [rng.standard_normal(p.shape) * 1e3 for p in ps], st_)
    assert ps[0].shape == (3, 2) and all(np.isfinite(p.data).all() for p in ps)


def test_stlr_points():
    s = StlrSchedule(total_steps=100, lr_max=1.0, cut_fraction=0.1, ratio=32)
    assert s(0) == pytest.approx(1 / 32)
    assert s.cut == 10 and s(10) == pytest.approx(1.0)
    assert s(100) == pytest.approx(1 / 32)
    assert s(5) == pytest.approx((s(0) + s(10)) / 2)
    assert s(55) == pytest.approx((s(10) + s(100)) / 2)
    assert stlr(10, 100, 2.0) == pytest.approx(2.0)
    with pytest.raises(TrainingConfigError):
        s(101)
    with pytest.raises(TrainingConfigError):
        StlrSchedule(10, 1.0, cut_fraction=1.0)


# ---------------------------------------------------------------- triplet training

COLORS = ["red", "blue", "green", "black", "white"]
NOUNS = ["shirt", "jeans", "dress", "jacket", "shoes"]


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    triplets = []
    for i in range(200):
        c, other = rng.choice(COLORS, 2, replace=False)
        triplets.append((c, f"{c} {rng.choice(NOUNS)}", f"{other} {rng.choice(NOUNS)}"))
    vocab = train_bpe([t for tr in triplets for t in tr], vocab_size=80)
    return vocab, triplets


def small_gru(vocab):
    return BiGruEncoder(BiGruConfig(len(vocab), embed_dim=8, hidden_dim=8, out_dim=8), seed=0)


def test_train_gru_reduces_loss(toy):
    vocab, triplets = toy
    m, tok = small_gru(vocab), TokenCache(vocab, 16)
    before = mean_triplet_loss(m, tok, triplets)
    res = train_gru(m, tok, lambda ep: triplets, GruTrainConfig(epochs=5, batch_size=16, lr=1e-2))
    assert len(res.epoch_losses) == 5
    assert mean_triplet_loss(m, tok, triplets) < before


def test_train_gru_is_deterministic(toy):
    vocab, triplets = toy
    cfg = GruTrainConfig(epochs=2, batch_size=32, lr=1e-2, seed=3)
    a = train_gru(small_gru(vocab), TokenCache(vocab, 16), lambda ep: triplets, cfg).epoch_losses
    b = train_gru(small_gru(vocab), TokenCache(vocab, 16), lambda ep: triplets, cfg).epoch_losses
    assert a == b


def test_zero_learning_rate_leaves_parameters(toy):
    vocab, triplets = toy
    m = small_gru(vocab)
    before = {k: v.data.copy() for k, v in m.named_parameters().items()}
    train_gru(m, TokenCache(vocab, 16), lambda ep: triplets, GruTrainConfig(epochs=2, batch_size=32, lr=0.0))
    for k, v in m.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_nan_loss_aborts(toy):
    vocab, triplets = toy
    m = small_gru(vocab)
    m.dense_w.data[:] = np.nan
    with pytest.raises(NumericalError):
        train_gru(m, TokenCache(vocab, 16), lambda ep: triplets, GruTrainConfig(epochs=1))


def test_empty_triplet_set_rejected(toy):
    vocab, _ = toy
    with pytest.raises(TrainingConfigError):
        train_gru(small_gru(vocab), TokenCache(vocab, 16), lambda ep: [], GruTrainConfig(epochs=1))


def test_finetune_reduces_loss_and_logs_schedule(tmp_path, toy):
    vocab, triplets = toy
    m, tok = tiny_transformer(len(vocab)), TokenCache(vocab, 16)
    before = mean_triplet_loss(m, tok, triplets)
    cfg = FinetuneConfig(epochs=2, batch_size=16, lr_max=3e-3)
    res = finetune(m, tok, lambda ep: triplets, cfg, RunLog(tmp_path / "ft.jsonl"))
    assert mean_triplet_loss(m, tok, triplets) < before
    logged = [json.loads(line) for line in (tmp_path / "ft.jsonl").read_text().splitlines()]
    sched = StlrSchedule(res.steps, cfg.lr_max, cfg.cut_fraction, cfg.ratio)
    assert len(logged) == res.steps
    assert all(r["lr"] == pytest.approx(sched(r["step"])) for r in logged)
    assert set(logged[0]) >= {"step", "lr", "loss", "wall_ms"}


def test_finetune_zero_peak_leaves_parameters(toy):
    vocab, triplets = toy
    m = tiny_transformer(len(vocab))
    before = {k: v.data.copy() for k, v in m.named_parameters().items()}
    finetune(m, TokenCache(vocab, 16), lambda ep: triplets[:40], FinetuneConfig(batch_size=8, lr_max=0.0))
    for k, v in m.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_finetune_checks_tokenizer_and_architecture(toy):
    vocab, triplets = toy
    m = tiny_transformer(len(vocab))
    m.tokenizer_hash = "not-this-one"
    with pytest.raises(TokenizerMismatch):
        finetune(m, TokenCache(vocab, 16), lambda ep: triplets)
    m.tokenizer_hash = vocab.hash
    with pytest.raises(TrainingConfigError):
        finetune(m, TokenCache(vocab, 16), lambda ep: triplets, expected_arch_hash="0" * 64)
    with pytest.raises(NotImplementedError):
        FinetuneConfig(discriminative_lr=2.6)


# ---------------------------------------------------------------- pre-training and fill-mask


def test_zero_mask_rate_rejected():
    with pytest.raises(TrainingConfigError):
        PretrainConfig(mask_rate=0.0)


@pytest.fixture(scope="module")
def two_token_model():
    vocab = train_bpe(["nike men"] * 20, vocab_size=40)
    seq = vocab.encode("nike men").ids
    assert len(seq) == 2
    m = tiny_transformer(len(vocab))
    res = pretrain_mlm(m, [seq] * 400, [seq], PretrainConfig(epochs=2, batch_size=8, lr_max=1e-2, n_evals=3))
    return vocab, m, res


def test_two_token_corpus_is_learned(two_token_model):
    vocab, m, res = two_token_model
    curve = [p for _, p in res.ppl_curve]
    assert len(curve) == 4 and curve[-1] < 1.05 < curve[0]
    assert all(b < a for a, b in zip(curve, curve[1:]))
    assert fill_mask(m, vocab, "nike <mask>", top=1)[0][0][0] == " men"
    assert fill_mask(m, vocab, "<mask> men", top=1)[0][0][0] == "nike"


def test_fill_mask_accuracy_report(two_token_model):
    vocab, m, _ = two_token_model
    rep = fill_mask_accuracy(m, vocab, ["nike men"] * 10, ["nike", "men"], n=5, top=1)
    assert rep["n"] == 5 and rep["accuracy"] == 1.0
    assert rep["chance_rate"] == pytest.approx(1 / len(vocab))
    with pytest.raises(TrainingConfigError):
        fill_mask(m, vocab, "nike men")
