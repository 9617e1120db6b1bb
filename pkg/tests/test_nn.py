"""Primitive-layer tests: embeddings, LSTM cell, dropout, masked CE.
Oracle values are computed by naive formulas coded inline."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genref.autodiff import Tensor, backward, no_grad
from genref.nn import (
    BOS,
    EOS,
    PAD,
    UNK,
    EmbeddingTable,
    LstmParams,
    TokenSeq,
    Vocab,
    dropout,
    embed,
    lstm_cell_step,
    masked_cross_entropy,
)
from tests.test_autodiff import assert_grads_close


def make_vocab(n_real):
    return Vocab(["w%02d" % i for i in range(n_real)])


# ---------------------------------------------------------------------------
# Vocab / TokenSeq
# ---------------------------------------------------------------------------

def test_vocab_reserved_ids_fixed():
    v = make_vocab(3)
    assert v.token_of(PAD) == "<pad>"
    assert v.token_of(BOS) == "<bos>"
    assert v.token_of(EOS) == "<eos>"
    assert v.token_of(UNK) == "<unk>"
    assert len(v) == 7
    assert v.id_of("nope") == UNK


def test_vocab_roundtrip_bijective():
    v = make_vocab(5)
    for i in range(len(v)):
        assert v.id_of(v.token_of(i)) == i


def test_tokenseq_true_length_counts_eos():
    s = TokenSeq(np.array([5, 6, EOS, PAD, PAD]))
    assert s.true_length == 3
    assert np.array_equal(s.body_ids(), [5, 6])


def test_tokenseq_rejects_pad_in_middle():
    with pytest.raises(ValueError):
        TokenSeq(np.array([5, PAD, EOS]))


def test_tokenseq_rejects_missing_eos():
    with pytest.raises(ValueError):
        TokenSeq(np.array([5, 6, 7]))


def test_tokenseq_from_text_pads():
    v = make_vocab(4)
    s = TokenSeq.from_text(v, "w00 w01", max_len=6)
    assert s.true_length == 3
    assert s.ids.shape == (6,)
    assert s.text(v) == "w00 w01"


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------

def test_embed_returns_requested_row():
    rng = np.random.default_rng(0)
    t = EmbeddingTable(5, 4, rng)
    out = embed(t, 2)
    assert np.array_equal(out.data, t.W_e.data[2])


def test_embed_pad_row_is_row_zero():
    rng = np.random.default_rng(0)
    t = EmbeddingTable(5, 4, rng)
    assert np.array_equal(embed(t, PAD).data, t.W_e.data[0])


def test_embed_gradient_is_one_hot_rows():
    rng = np.random.default_rng(1)
    t = EmbeddingTable(5, 3, rng)
    gm = backward(embed(t, 2).sum())
    g = gm.get(t.W_e)
    expect = np.zeros((5, 3))
    expect[2] = 1.0
    assert np.array_equal(g, expect)


def test_embed_out_of_range_rejected():
    t = EmbeddingTable(5, 3, np.random.default_rng(0))
    with pytest.raises(IndexError):
        embed(t, 5)


# ---------------------------------------------------------------------------
# lstm_cell_step
# ---------------------------------------------------------------------------

def zero_params(in_size, hidden):
    p = LstmParams(in_size, hidden, np.random.default_rng(0))
    p.W.data[:] = 0.0
    p.b.data[:] = 0.0
    return p


def test_lstm_zero_params_zero_state_gives_zero():
    p = zero_params(3, 4)
    h, c = lstm_cell_step(Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p)
    assert np.array_equal(h.data, np.zeros(4))
    assert np.array_equal(c.data, np.zeros(4))


def test_lstm_memory_passthrough():
    # f-gate saturated open, i-gate saturated shut: cell state survives intact
    p = zero_params(3, 4)
    p.b.data[0:4] = -1e3
    p.b.data[4:8] = 1e3
    c0 = np.array([0.3, -0.7, 1.5, 0.0])
    _, c1 = lstm_cell_step(Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(c0), p)
    assert np.allclose(c1.data, c0, rtol=0, atol=1e-12)


def test_lstm_random_step_fd():
    rng = np.random.default_rng(5)
    p = LstmParams(3, 4, rng)
    x = Tensor(rng.normal(size=3))
    h = Tensor(rng.normal(size=4))
    c = Tensor(rng.normal(size=4))

    def f():
        h2, c2 = lstm_cell_step(x, h, c, p)
        return h2.sum() + c2.tanh().sum()

    assert_grads_close(f, [p.W, p.b, x, h, c])


def test_lstm_hidden_bounded():
    rng = np.random.default_rng(9)
    p = LstmParams(6, 5, rng)
    h, _ = lstm_cell_step(
        Tensor(rng.normal(size=(8, 6)) * 10),
        Tensor(rng.normal(size=(8, 5)) * 10),
        Tensor(rng.normal(size=(8, 5)) * 10),
        p,
    )
    assert np.abs(h.data).max() <= 1.0


def test_lstm_gate_views_have_expected_shapes():
    p = LstmParams(3, 4, np.random.default_rng(0))
    for w, b in (p.input_gate, p.forget_gate, p.cell_gate, p.output_gate):
        assert w.shape == (7, 4) and b.shape == (4,)
    # forget bias init +1, others 0
    assert np.array_equal(p.forget_gate[1], np.ones(4))
    assert np.array_equal(p.input_gate[1], np.zeros(4))


def test_lstm_shape_mismatch_rejected():
    p = LstmParams(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lstm_cell_step(Tensor(np.zeros(2)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def test_dropout_p0_identity_both_modes():
    x = Tensor(np.ones((3, 3)))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, "train", rng) is x
    assert dropout(x, 0.0, "eval", rng) is x


def test_dropout_eval_identity():
    x = Tensor(np.ones((3, 3)))
    assert dropout(x, 0.5, "eval", np.random.default_rng(0)) is x


def test_dropout_rejects_p_ge_1():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, "train", np.random.default_rng(0))


def test_dropout_train_mean_preserved():
    rng = np.random.default_rng(42)
    x = Tensor(np.ones(100000))
    out = dropout(x, 0.4, "train", rng)
    assert abs(out.data.mean() - 1.0) < 0.01


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(7)
    x = Tensor(np.ones(1000))
    out = dropout(x, 0.5, "train", rng)
    gm = backward(out.sum())
    assert np.array_equal(gm.get(x), out.data)


# ---------------------------------------------------------------------------
# masked cross entropy
# ---------------------------------------------------------------------------

def uniform_logit_steps(n_steps, vocab_size, batch=1):
    return [Tensor(np.zeros((batch, vocab_size))) for _ in range(n_steps)]


def test_uniform_logits_loss_is_length_times_log_v():
    gold = TokenSeq(np.array([5, 6, 7, 8, 9, 10, EOS]))
    loss, _ = masked_cross_entropy(uniform_logit_steps(7, 20), gold)
    assert abs(float(loss.data) - 7 * math.log(20)) < 1e-9 * 7 * math.log(20)


def test_probability_one_gives_zero_loss():
    gold = TokenSeq(np.array([4, 5, EOS]))
    steps = []
    for t in range(3):
        z = np.full((1, 8), -1e4)
        z[0, gold.ids[t]] = 1e4
        steps.append(Tensor(z))
    loss, _ = masked_cross_entropy(steps, gold)
    assert float(loss.data) == 0.0


def test_ce_matches_naive_oracle():
    rng = np.random.default_rng(11)
    v = 12
    gold = TokenSeq(np.array([4, 7, 5, EOS, PAD, PAD]))
    steps = [Tensor(rng.normal(size=(1, v)) * 2) for _ in range(6)]
    loss, _ = masked_cross_entropy(steps, gold)
    naive = 0.0
    for t in range(gold.true_length):
        z = steps[t].data[0]
        p = np.exp(z) / np.exp(z).sum()
        naive -= math.log(p[gold.ids[t]])
    assert abs(float(loss.data) - naive) < 1e-9 * abs(naive)


def test_pad_logits_do_not_affect_loss():
    rng = np.random.default_rng(13)
    gold = TokenSeq(np.array([4, EOS, PAD, PAD]))
    steps = [Tensor(rng.normal(size=(1, 9))) for _ in range(4)]
    loss1, _ = masked_cross_entropy(steps, gold)
    steps2 = [Tensor(s.data.copy()) for s in steps]
    steps2[2].data[:] = 99.0
    steps2[3].data[:] = -99.0
    loss2, _ = masked_cross_entropy(steps2, gold)
    assert float(loss1.data) == float(loss2.data)


def test_exp_neg_loss_equals_product_of_gold_probs():
    rng = np.random.default_rng(17)
    gold = TokenSeq(np.array([5, 8, EOS]))
    steps = [Tensor(rng.normal(size=(1, 10))) for _ in range(3)]
    loss, per_step = masked_cross_entropy(steps, gold)
    with no_grad():
        prod = 1.0
        for t in range(3):
            z = steps[t].data[0]
            p = np.exp(z - z.max())
            p /= p.sum()
            prod *= p[gold.ids[t]]
    assert abs(math.exp(-float(loss.data)) - prod) < 1e-9 * prod
    assert abs(sum(float(s.data[0]) for s in per_step) + float(loss.data)) < 1e-12


def test_batch_loss_is_mean_of_per_sample_sums():
    rng = np.random.default_rng(19)
    golds = [
        TokenSeq(np.array([4, 5, EOS, PAD])),
        TokenSeq(np.array([6, EOS, PAD, PAD])),
    ]
    steps = [Tensor(rng.normal(size=(2, 9))) for _ in range(4)]
    loss, _ = masked_cross_entropy(steps, golds)
    singles = []
    for r, g in enumerate(golds):
        srow = [Tensor(s.data[r:r + 1].copy()) for s in steps]
        l, _ = masked_cross_entropy(srow, g)
        singles.append(float(l.data))
    assert abs(float(loss.data) - np.mean(singles)) < 1e-12


def test_true_length_overflow_rejected():
    gold = TokenSeq(np.array([4, 5, EOS]))
    with pytest.raises(ValueError):
        masked_cross_entropy(uniform_logit_steps(2, 9), gold)


def test_ce_gradient_fd():
    rng = np.random.default_rng(23)
    gold = TokenSeq(np.array([4, 6, EOS, PAD]))
    steps = [Tensor(rng.normal(size=(1, 8))) for _ in range(4)]

    def f():
        loss, _ = masked_cross_entropy(steps, gold)
        return loss

    assert_grads_close(f, steps)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_ce_loss_nonnegative_property(seed, n_words):
    rng = np.random.default_rng(seed)
    body = rng.integers(4, 9, size=n_words).tolist()
    gold = TokenSeq(np.array(body + [EOS]))
    steps = [Tensor(rng.normal(size=(1, 9)) * 3) for _ in range(n_words + 1)]
    loss, _ = masked_cross_entropy(steps, gold)
    assert float(loss.data) >= 0.0
