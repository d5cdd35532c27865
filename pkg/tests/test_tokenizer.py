"""Tests for the column tokenizer, detokenizer, and latent flattening."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabforge import nn, tokenizer as tok
from tabforge.errors import DimensionError


def make_params(m_num=1, cards=(3,), d=4, seed=0):
    store = nn.ParamStore()
    rng = np.random.default_rng(seed)
    t = tok.TokenizerParams(store, m_num, list(cards), d, rng)
    dt = tok.DetokenizerParams(store, m_num, list(cards), d, rng)
    return store, t, dt


def test_zero_numerical_input_gives_bias():
    store, t, _ = make_params()
    t.num_b[0].data = np.array([[1.0, 2.0, 3.0, 4.0]])
    e = tok.tokenize(np.array([0.0]), [np.array([1.0, 0.0, 0.0])], t)
    assert np.allclose(e[0], [1.0, 2.0, 3.0, 4.0])


def test_one_hot_selector_property_is_exact():
    _, t, _ = make_params(cards=(5,), seed=3)
    for k in range(5):
        onehot = np.zeros(5)
        onehot[k] = 1.0
        e = tok.tokenize(np.array([0.7]), [onehot], t)
        expect = t.cat_w[0].data[k] + t.cat_b[0].data[0]
        assert np.array_equal(e[1], expect)


def test_numeric_token_hand_case():
    _, t, _ = make_params(m_num=1, cards=())
    t.num_w[0].data = np.array([[1.0, 0.0, 0.0, 0.0]])
    t.num_b[0].data = np.zeros((1, 4))
    e = tok.tokenize(np.array([2.0]), [], t)
    assert np.allclose(e[0], [2.0, 0.0, 0.0, 0.0])


def test_detokenize_zero_logits_uniform():
    _, _, dt = make_params(cards=(4,))
    dt.cat_w[0].data = np.zeros((4, 4))
    dt.cat_b[0].data = np.zeros((1, 4))
    _, probs = tok.detokenize(np.zeros((2, 4)), dt)
    assert np.allclose(probs[0], 0.25)


def test_detokenize_saturated_logits():
    _, _, dt = make_params(m_num=0, cards=(2,), d=1)
    dt.cat_w[0].data = np.array([[10.0, -10.0]])
    dt.cat_b[0].data = np.zeros((1, 2))
    _, probs = tok.detokenize(np.array([[1.0]]), dt)
    assert probs[0][0] > 0.999999
    assert tok.argmax_labels(probs) == [0]


def test_detokenize_hand_softmax():
    _, _, dt = make_params(m_num=0, cards=(2,), d=2)
    dt.cat_w[0].data = np.array([[1.0, -1.0], [0.5, 0.5]])
    dt.cat_b[0].data = np.array([[0.1, -0.1]])
    e = np.array([[2.0, 3.0]])
    logits = e @ dt.cat_w[0].data + dt.cat_b[0].data
    expect = np.exp(logits[0] - logits[0].max())
    expect /= expect.sum()
    _, probs = tok.detokenize(e, dt)
    assert np.allclose(probs[0], expect)


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_detokenize_probabilities_sum_to_one(m_num, m_cat, seed):
    rng = np.random.default_rng(seed)
    cards = tuple(int(c) for c in rng.integers(2, 6, size=m_cat))
    _, _, dt = make_params(m_num=m_num, cards=cards, d=3, seed=seed)
    e = rng.normal(size=(m_num + m_cat, 3)) * 3
    _, probs = tok.detokenize(e, dt)
    for p in probs:
        assert abs(p.sum() - 1.0) < 1e-12


def test_flatten_definition():
    z = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tok.flatten_latent(z), [1.0, 2.0, 3.0, 4.0])


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_flatten_unflatten_round_trip(m, d, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(m, d))
    assert np.array_equal(tok.unflatten_latent(tok.flatten_latent(z), d), z)
    zb = rng.normal(size=(3, m, d))
    assert np.array_equal(tok.unflatten_latent(tok.flatten_latent(zb), d), zb)


def test_unflatten_rejects_bad_length():
    with pytest.raises(DimensionError):
        tok.unflatten_latent(np.zeros(5), 2)


def test_tokenize_batch_matches_single_rows():
    rng = np.random.default_rng(5)
    _, t, _ = make_params(m_num=2, cards=(3, 2), seed=5)
    x = rng.normal(size=(4, 2))
    oh = [np.eye(3)[rng.integers(0, 3, 4)], np.eye(2)[rng.integers(0, 2, 4)]]
    batch = tok.tokenize_batch(x, oh, t)
    for b in range(4):
        single = tok.tokenize(x[b], [oh[0][b], oh[1][b]], t)
        assert np.array_equal(batch.data[b], single)


def test_tokenize_shape_mismatch():
    _, t, _ = make_params()
    with pytest.raises(DimensionError):
        tok.tokenize_batch(np.zeros((2, 3)), [np.zeros((2, 3))], t)
    with pytest.raises(DimensionError):
        tok.tokenize_batch(np.zeros((2, 1)), [np.zeros((2, 4))], t)
