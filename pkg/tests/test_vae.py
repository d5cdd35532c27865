"""Tests for the transformer beta-VAE: stacks, loss, scheduler, training."""

import numpy as np
import pytest

from tabforge import nn, tableio as tio, vae
from tabforge import tokenizer as tok
from tabforge.errors import NumericError

from helpers import assert_grads_close, finite_diff_grads


def tiny_model(seed=0, m_num=1, cards=(2,), d=2, ffn=4):
    return vae.VaeModel(m_num, list(cards), d=d, ffn_dim=ffn, seed=seed)


def numpy_stack_trace(model, stack, e):
    """Independent layer-by-layer re-evaluation of a transformer stack."""
    h = np.asarray(e, dtype=np.float64)
    for block in stack.blocks:
        d = h.shape[1]
        q, k, v = h @ block.wq.data, h @ block.wk.data, h @ block.wv.data
        logits = q @ k.T / np.sqrt(d)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        h1 = h + w @ v
        h1 = _ln(h1, block.ln1_g.data, block.ln1_b.data)
        ff = np.maximum(h1 @ block.w1.data + block.b1.data, 0.0) @ block.w2.data + block.b2.data
        h = _ln(h1 + ff, block.ln2_g.data, block.ln2_b.data)
    return h


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g.reshape(-1) + b.reshape(-1)


# ---------------------------------------------------------------------------
# encode / decode


def test_encode_is_deterministic():
    model = tiny_model()
    e = np.random.default_rng(0).normal(size=(2, 2))
    mu1, ls1 = model.encode(e)
    mu2, ls2 = model.encode(e)
    assert np.array_equal(mu1.data, mu2.data)
    assert np.array_equal(ls1.data, ls2.data)


def test_encode_single_column_table():
    model = vae.VaeModel(1, [], d=3, ffn_dim=4, seed=1)
    mu, ls = model.encode(np.ones((1, 3)))
    assert mu.data.shape == (1, 3) and ls.data.shape == (1, 3)


def test_encode_zero_input_matches_numpy_trace():
    model = tiny_model(seed=5)
    e = np.zeros((2, 2))
    mu, ls = model.encode(e)
    assert np.allclose(mu.data, numpy_stack_trace(model, model.mu_encoder, e), atol=1e-12)
    assert np.allclose(ls.data, numpy_stack_trace(model, model.logsig_encoder, e), atol=1e-12)


def test_encode_decode_match_numpy_trace_random_input():
    model = tiny_model(seed=9, m_num=2, cards=(3,), d=4, ffn=8)
    e = np.random.default_rng(3).normal(size=(3, 4))
    mu, _ = model.encode(e)
    assert np.allclose(mu.data, numpy_stack_trace(model, model.mu_encoder, e), atol=1e-12)
    out = model.decode(e)
    assert np.allclose(out.data, numpy_stack_trace(model, model.decoder, e), atol=1e-12)


def test_stack_is_permutation_equivariant():
    model = tiny_model(seed=2, m_num=3, cards=(), d=3, ffn=6)
    e = np.random.default_rng(4).normal(size=(3, 3))
    perm = [2, 0, 1]
    mu, _ = model.encode(e)
    mu_p, _ = model.encode(e[perm])
    assert np.allclose(mu_p.data, mu.data[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# reparameterize


def test_reparameterize_zero_eps_returns_mu():
    mu = np.array([[1.0, -2.0]])
    z = vae.reparameterize(mu, np.zeros((1, 2)), np.zeros((1, 2)))
    assert np.array_equal(z.data, mu)


def test_reparameterize_zero_sigma_limit():
    z = vae.reparameterize(np.array([[3.0]]), np.array([[-745.0]]), np.array([[10.0]]))
    assert np.allclose(z.data, 3.0)


def test_reparameterize_hand_value():
    z = vae.reparameterize(np.array([[1.0]]), np.array([[np.log(2.0)]]), np.array([[0.5]]))
    assert np.allclose(z.data, 2.0)


# ---------------------------------------------------------------------------
# vae_loss


def test_loss_perfect_reconstruction_is_zero():
    total, recon, kl = vae.vae_loss(
        x_num=np.array([[1.5]]), cat_idx=np.array([[1]]),
        num_hat=np.array([[1.5]]), cat_probs=[np.array([[0.0, 1.0]])],
        mu=np.zeros((1, 2)), logsig=np.zeros((1, 2)), beta=1.0)
    assert total == 0.0 and recon == 0.0 and kl == 0.0


def test_loss_kl_zero_iff_standard_normal():
    _, _, kl = vae.vae_loss(np.zeros((1, 1)), np.zeros((1, 0), dtype=int),
                            np.zeros((1, 1)), [], np.zeros((2, 2)), np.zeros((2, 2)), 1.0)
    assert kl == 0.0
    _, _, kl2 = vae.vae_loss(np.zeros((1, 1)), np.zeros((1, 0), dtype=int),
                             np.zeros((1, 1)), [], np.full((2, 2), 0.3),
                             np.zeros((2, 2)), 1.0)
    assert kl2 > 1e-12


def test_loss_hand_mse():
    total, recon, kl = vae.vae_loss(np.array([[1.0]]), np.zeros((1, 0), dtype=int),
                                    np.array([[0.0]]), [],
                                    np.array([[0.4]]), np.array([[0.1]]), beta=0.0)
    assert total == 1.0 and recon == 1.0 and kl > 0.0


def test_loss_kl_nonnegative_random():
    rng = np.random.default_rng(8)
    for _ in range(50):
        mu = rng.normal(size=(3, 4))
        logsig = rng.normal(size=(3, 4))
        _, _, kl = vae.vae_loss(np.zeros((3, 1)), np.zeros((3, 0), dtype=int),
                                np.zeros((3, 1)), [], mu, logsig, 1.0)
        assert kl >= 0.0


def test_loss_clamps_zero_probability():
    total, recon, _ = vae.vae_loss(
        np.zeros((1, 0)), np.array([[0]]), np.zeros((1, 0)),
        [np.array([[0.0, 1.0]])], np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
    assert np.isfinite(total)
    assert recon == pytest.approx(-np.log(1e-12))


def test_training_loss_route_agrees_with_public_loss():
    model = tiny_model(seed=11)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 1))
    cat = rng.integers(0, 2, size=(4, 1))
    oh = [tio.one_hot_matrix(cat[:, 0], 2)]
    eps = rng.normal(size=(4, model.m, model.d))
    total_n, recon_n, kl_n = vae._loss_nodes(model, x, cat, oh, eps, 0.37, None)

    e3 = tok.tokenize_batch(x, oh, model.tokenizer)
    mu, logsig = model.encode(e3)
    z = vae.reparameterize(mu, logsig, eps)
    num_out, logits = tok.detokenize_batch(model.decode(z), model.detokenizer)
    probs = [nn.softmax_last(l).data for l in logits]
    num_hat = np.hstack([t.data for t in num_out])
    total_v, recon_v, kl_v = vae.vae_loss(x, cat, num_hat, probs,
                                          mu.data, logsig.data, 0.37)
    assert total_n.item() == pytest.approx(total_v, rel=1e-12)
    assert recon_n.item() == pytest.approx(recon_v, rel=1e-12)
    assert kl_n.item() == pytest.approx(kl_v, rel=1e-12)


def test_total_loss_gradient_vs_finite_differences():
    model = tiny_model(seed=21, m_num=1, cards=(2,), d=2, ffn=4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 1))
    cat = rng.integers(0, 2, size=(3, 1))
    oh = [tio.one_hot_matrix(cat[:, 0], 2)]
    eps = rng.normal(size=(3, model.m, model.d))

    def loss_value():
        total, _, _ = vae._loss_nodes(model, x, cat, oh, eps, 0.01, None)
        return total.item()

    tape = nn.Tape()
    total, _, _ = vae._loss_nodes(model, x, cat, oh, eps, 0.01, tape)
    nn.backward(tape, total)
    analytic = model.store.gradients()
    numeric = finite_diff_grads(loss_value, model.store)
    assert_grads_close(analytic, numeric, rel=1e-4)


# ---------------------------------------------------------------------------
# beta scheduler


def test_beta_stays_at_max_under_improving_losses():
    s = vae.BetaScheduler(0.01, 1e-5, 0.7, patience=3)
    for loss in [10.0, 9.0, 8.0, 7.0, 6.0]:
        assert vae.beta_step(s, loss) == 0.01


def test_beta_decays_after_patience_stalls():
    s = vae.BetaScheduler(0.01, 1e-5, 0.7, patience=4)
    vae.beta_step(s, 1.0)
    for _ in range(3):
        assert vae.beta_step(s, 1.0) == 0.01
    assert vae.beta_step(s, 1.0) == pytest.approx(0.007)


def test_beta_floors_at_min_exactly():
    s = vae.BetaScheduler(0.01, 1e-5, 0.7, patience=1)
    vae.beta_step(s, 1.0)
    for _ in range(100):
        vae.beta_step(s, 1.0)
    assert s.beta == 1e-5


def test_beta_equals_max_times_decay_power():
    s = vae.BetaScheduler(0.01, 1e-12, 0.7, patience=2)
    vae.beta_step(s, 5.0)
    for k in range(1, 20):
        vae.beta_step(s, 5.0)
        beta = vae.beta_step(s, 5.0)
        assert beta == 0.01 * 0.7 ** k


# ---------------------------------------------------------------------------
# train_vae


def training_table(n=200, seed=0):
    rng = np.random.default_rng(seed)
    schema = tio.TableSchema((
        tio.ColumnSpec("x", "numerical"),
        tio.ColumnSpec("flag", "categorical"),
    ))
    x = rng.normal(size=(n, 1))
    cat = (x[:, 0] > 0).astype(np.int64).reshape(-1, 1)
    raw = tio.Table(schema, x, cat, [["neg", "pos"]])
    state = tio.fit_preprocess(raw)
    return tio.apply_preprocess(raw, state)


def test_train_vae_reduces_reconstruction():
    cfg = vae.VaeTrainConfig(token_dim=4, ffn_dim=32, epochs=500, batch_size=256,
                             lr=1e-3)
    _, latents, history = vae.train_vae(training_table(), cfg, seed=7)
    first = history[0][1]
    last = history[-1][1]
    assert last < 0.2 * first
    assert latents.shape == (200, 2 * 4)


def test_train_vae_beta_trajectory_contract():
    cfg = vae.VaeTrainConfig(token_dim=2, ffn_dim=8, epochs=60, batch_size=64,
                             patience=3)
    _, _, history = vae.train_vae(training_table(80, seed=3), cfg, seed=1)
    betas = [h[3] for h in history]
    assert all(b2 <= b1 for b1, b2 in zip(betas, betas[1:]))
    assert all(cfg.beta_min <= b <= cfg.beta_max for b in betas)


def test_train_vae_is_bitwise_deterministic():
    cfg = vae.VaeTrainConfig(token_dim=2, ffn_dim=8, epochs=10, batch_size=64)
    t = training_table(50, seed=2)
    m1, l1, h1 = vae.train_vae(t, cfg, seed=11)
    m2, l2, h2 = vae.train_vae(t, cfg, seed=11)
    for name, p in m1.store.params.items():
        assert np.array_equal(p.data, m2.store.params[name].data), name
    assert np.array_equal(l1, l2)
    assert h1 == h2
