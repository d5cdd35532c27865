"""Transformer beta-VAE over column tokens.

Two independent 2-layer transformer stacks produce the latent mean and log
standard deviation; a third stack of the same shape decodes reparameterized
latents back to tokens. The KL weight beta decays multiplicatively whenever
the epoch reconstruction loss stalls, floored at beta_min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InputError, NumericError
from .tableio import Table, one_hot_matrix
from .tokenizer import (DetokenizerParams, TokenizerParams, detokenize_batch,
                        flatten_latent, tokenize_batch)

PROB_FLOOR = 1e-12


@dataclass
class VaeTrainConfig:
    token_dim: int = 4        # d
    ffn_dim: int = 128        # D
    epochs: int = 500
    batch_size: int = 256
    lr: float = 1e-3
    beta_max: float = 0.01
    beta_min: float = 1e-5
    beta_decay: float = 0.7   # lambda
    patience: int = 10        # stall epochs before decaying beta
    latent_source: str = "mu"  # "mu" | "sample"

    def validate(self):
        if self.token_dim < 1 or self.ffn_dim < 1 or self.epochs < 1 or \
           self.batch_size < 1 or self.lr <= 0:
            raise InputError("vae config values must be positive")
        if not (0.0 < self.beta_decay < 1.0):
            raise InputError("beta decay must lie in (0, 1)")
        if self.beta_min > self.beta_max:
            raise InputError("beta_min must not exceed beta_max")
        if self.latent_source not in ("mu", "sample"):
            raise InputError(f"unknown latent source {self.latent_source!r}")
        return self


@dataclass
class BetaScheduler:
    """Multiplicative beta decay driven by reconstruction-loss stalls."""

    beta_max: float
    beta_min: float
    decay: float
    patience: int
    beta: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    stall: int = field(init=False, default=0)
    decays: int = field(init=False, default=0)

    def __post_init__(self):
        self.beta = self.beta_max


def beta_step(sched: BetaScheduler, epoch_recon_loss: float) -> float:
    """Advance the scheduler with one epoch's reconstruction loss."""
    if epoch_recon_loss < sched.best:
        sched.best = epoch_recon_loss
        sched.stall = 0
    else:
        sched.stall += 1
        if sched.stall >= sched.patience:
            sched.decays += 1
            # recompute from the decay count so beta == beta_max * decay**k exactly
            sched.beta = max(sched.beta_max * sched.decay ** sched.decays, sched.beta_min)
            sched.stall = 0
    return sched.beta


class TransformerBlock:
    """Self-attention + FFN, each followed by a residual add and layer norm."""

    def __init__(self, store: nn.ParamStore, prefix: str, d: int, ffn_dim: int,
                 rng: np.random.Generator):
        bd = 1.0 / math.sqrt(d)
        bf = 1.0 / math.sqrt(ffn_dim)
        self.wq = store.create(f"{prefix}.attn.wq", rng.uniform(-bd, bd, (d, d)))
        self.wk = store.create(f"{prefix}.attn.wk", rng.uniform(-bd, bd, (d, d)))
        self.wv = store.create(f"{prefix}.attn.wv", rng.uniform(-bd, bd, (d, d)))
        self.ln1_g = store.create(f"{prefix}.ln1.g", np.ones(d))
        self.ln1_b = store.create(f"{prefix}.ln1.b", np.zeros(d))
        self.w1 = store.create(f"{prefix}.ffn.w1", rng.uniform(-bd, bd, (d, ffn_dim)))
        self.b1 = store.create(f"{prefix}.ffn.b1", np.zeros((1, ffn_dim)))
        self.w2 = store.create(f"{prefix}.ffn.w2", rng.uniform(-bf, bf, (ffn_dim, d)))
        self.b2 = store.create(f"{prefix}.ffn.b2", np.zeros((1, d)))
        self.ln2_g = store.create(f"{prefix}.ln2.g", np.ones(d))
        self.ln2_b = store.create(f"{prefix}.ln2.b", np.zeros(d))
        self.d = d

    def forward(self, h3: nn.Tensor, tape: nn.Tape | None = None) -> nn.Tensor:
        bsz, m, d = h3.data.shape
        attn = nn.self_attention_batched(h3, self.wq, self.wk, self.wv, tape)
        h = nn.layer_norm(nn.add(h3, attn, tape), self.ln1_g, self.ln1_b, tape=tape)
        flat = nn.reshape(h, (bsz * m, d), tape)
        ff = nn.dense_forward(nn.relu(nn.dense_forward(flat, self.w1, self.b1, tape), tape),
                              self.w2, self.b2, tape)
        ff3 = nn.reshape(ff, (bsz, m, d), tape)
        return nn.layer_norm(nn.add(h, ff3, tape), self.ln2_g, self.ln2_b, tape=tape)


class TransformerStack:
    def __init__(self, store, prefix, d, ffn_dim, rng, n_layers=2):
        self.blocks = [TransformerBlock(store, f"{prefix}.block{i}", d, ffn_dim, rng)
                       for i in range(n_layers)]

    def forward(self, h3, tape=None):
        for block in self.blocks:
            h3 = block.forward(h3, tape)
        return h3


class VaeModel:
    """Tokenizer + twin transformer encoders + transformer decoder + detokenizer."""

    def __init__(self, m_num: int, cardinalities: list[int], d: int = 4,
                 ffn_dim: int = 128, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AE]))
        self.m_num = m_num
        self.cardinalities = list(cardinalities)
        self.d = d
        self.ffn_dim = ffn_dim
        self.store = nn.ParamStore()
        self.tokenizer = TokenizerParams(self.store, m_num, cardinalities, d, rng)
        self.mu_encoder = TransformerStack(self.store, "enc_mu", d, ffn_dim, rng)
        self.logsig_encoder = TransformerStack(self.store, "enc_ls", d, ffn_dim, rng)
        self.decoder = TransformerStack(self.store, "dec", d, ffn_dim, rng)
        self.detokenizer = DetokenizerParams(self.store, m_num, cardinalities, d, rng)

    @property
    def m(self) -> int:
        return self.m_num + len(self.cardinalities)

    @property
    def latent_dim(self) -> int:
        return self.m * self.d

    def encode(self, e: nn.Tensor | np.ndarray, tape: nn.Tape | None = None):
        """Token block (B, M, d) or single (M, d) -> (mu, logsig) of same shape."""
        e, squeeze = _as_block(e)
        mu = self.mu_encoder.forward(e, tape)
        logsig = self.logsig_encoder.forward(e, tape)
        nn.check_finite(mu, "encoder mu output")
        nn.check_finite(logsig, "encoder logsig output")
        return (_maybe_squeeze(mu, squeeze), _maybe_squeeze(logsig, squeeze))

    def decode(self, z: nn.Tensor | np.ndarray, tape: nn.Tape | None = None):
        z, squeeze = _as_block(z)
        out = self.decoder.forward(z, tape)
        nn.check_finite(out, "decoder output")
        return _maybe_squeeze(out, squeeze)


def _as_block(x):
    t = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
    if t.data.ndim == 2:
        return nn.reshape(t, (1, *t.data.shape)), True
    return t, False


def _maybe_squeeze(t, squeeze):
    return nn.reshape(t, t.data.shape[1:]) if squeeze else t


def reparameterize(mu, logsig, eps, tape: nn.Tape | None = None):
    """z = mu + exp(logsig) * eps with eps a standard-normal draw."""
    mu_t = mu if isinstance(mu, nn.Tensor) else nn.Tensor(mu)
    ls_t = logsig if isinstance(logsig, nn.Tensor) else nn.Tensor(logsig)
    eps_t = nn.Tensor(np.asarray(eps, dtype=np.float64))
    return nn.add(mu_t, nn.mul(nn.exp(ls_t, tape), eps_t, tape), tape)


def _loss_nodes(model: VaeModel, x_num: np.ndarray, cat_idx: np.ndarray,
                onehots: list[np.ndarray], eps: np.ndarray, beta: float,
                tape: nn.Tape | None):
    """Forward pass + composite loss as graph nodes. Returns (total, recon, kl)."""
    bsz = x_num.shape[0]
    e3 = tokenize_batch(x_num, onehots, model.tokenizer, tape)
    mu, logsig = model.encode(e3, tape)
    z = reparameterize(mu, logsig, eps, tape)
    e_hat = model.decode(z, tape)
    num_out, cat_logits = detokenize_batch(e_hat, model.detokenizer, tape)

    recon = None
    for i, out in enumerate(num_out):
        diff = nn.sub(out, nn.Tensor(x_num[:, i:i + 1]), tape)
        term = nn.scale(nn.sum_all(nn.mul(diff, diff, tape), tape), 1.0 / bsz, tape)
        recon = term if recon is None else nn.add(recon, term, tape)
    for i, logits in enumerate(cat_logits):
        oh = one_hot_matrix(cat_idx[:, i], model.cardinalities[i])
        ce = nn.softmax_cross_entropy(logits, oh, tape)
        term = nn.scale(nn.sum_all(ce, tape), 1.0 / bsz, tape)
        recon = term if recon is None else nn.add(recon, term, tape)

    # per-dimension KL against N(0, 1): 0.5 * (mu^2 + sigma^2 - 2 log sigma - 1)
    kl_terms = nn.add(nn.mul(mu, mu, tape), nn.exp(nn.scale(logsig, 2.0, tape), tape), tape)
    kl_terms = nn.add_scalar(nn.add(kl_terms, nn.scale(logsig, -2.0, tape), tape), -1.0, tape)
    kl = nn.scale(nn.mean_all(kl_terms, tape), 0.5, tape)

    total = nn.add(recon, nn.scale(kl, beta, tape), tape)
    return total, recon, kl


def vae_loss(x_num, cat_idx, num_hat, cat_probs, mu, logsig, beta,
             cardinalities=None):
    """Composite loss from model outputs (values, not graph nodes).

    Reconstruction is the per-column MSE over numericals plus per-column
    cross-entropy against the detokenizer's probability vectors, both averaged
    over the batch; probabilities are floored at 1e-12 inside the log.
    """
    x_num = np.atleast_2d(np.asarray(x_num, dtype=np.float64))
    num_hat = np.atleast_2d(np.asarray(num_hat, dtype=np.float64))
    cat_idx = np.atleast_2d(np.asarray(cat_idx, dtype=np.int64))
    bsz = max(x_num.shape[0], cat_idx.shape[0], 1)

    recon = 0.0
    if x_num.size:
        recon += float(((x_num - num_hat) ** 2).sum() / x_num.shape[0])
    for i, probs in enumerate(cat_probs):
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        p_true = probs[np.arange(probs.shape[0]), cat_idx[:, i]]
        recon += float(-np.log(np.maximum(p_true, PROB_FLOOR)).mean())

    mu = np.asarray(mu, dtype=np.float64)
    logsig = np.asarray(logsig, dtype=np.float64)
    kl = float(0.5 * (mu ** 2 + np.exp(2.0 * logsig) - 2.0 * logsig - 1.0).mean())
    total = recon + beta * kl
    return total, recon, kl


def train_vae(processed: Table, config: VaeTrainConfig, seed: int = 0):
    """Fit the VAE on a preprocessed table.

    Returns (model, latents, history): latents is the (n, M*d) matrix of
    flattened encoder means used as the diffusion training set; history holds
    one (epoch, recon, kl, beta) row per epoch.
    """
    config.validate()
    n = processed.n_rows
    if n == 0:
        raise InputError("cannot train on an empty table")
    cards = [len(labels) for labels in processed.cat_labels]
    model = VaeModel(processed.schema.m_num, cards, config.token_dim,
                     config.ffn_dim, seed=seed)
    x_num = processed.num
    cat_idx = processed.cat
    onehots_full = [one_hot_matrix(cat_idx[:, i], c) for i, c in enumerate(cards)]

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AE, 1]))
    sched = BetaScheduler(config.beta_max, config.beta_min, config.beta_decay,
                          config.patience)
    history = []
    batch = min(config.batch_size, n)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        recon_sum = 0.0
        kl_sum = 0.0
        beta_used = sched.beta
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = x_num[idx]
            cb = cat_idx[idx]
            ohb = [oh[idx] for oh in onehots_full]
            eps = rng.standard_normal((idx.size, model.m, model.d))
            tape = nn.Tape()
            model.store.zero_grads()
            total, recon, kl = _loss_nodes(model, xb, cb, ohb, eps, beta_used, tape)
            if not np.isfinite(total.item()):
                raise NumericError(
                    f"vae training diverged at epoch {epoch}, batch {start // batch}: "
                    f"recon={recon.item()}, kl={kl.item()}")
            nn.backward(tape, total)
            nn.adam_step(model.store, model.store.gradients(), config.lr)
            recon_sum += recon.item() * idx.size
            kl_sum += kl.item() * idx.size
        epoch_recon = recon_sum / n
        epoch_kl = kl_sum / n
        history.append((epoch, epoch_recon, epoch_kl, beta_used))
        beta_step(sched, epoch_recon)

    latents = encode_table(model, processed, latent_source=config.latent_source,
                           seed=seed)
    return model, latents, history


def encode_table(model: VaeModel, processed: Table, latent_source: str = "mu",
                 seed: int = 0, chunk: int = 1024) -> np.ndarray:
    """Encode every row to its flattened latent mean (or a sampled latent)."""
    cards = model.cardinalities
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AE, 2]))
    out = np.empty((processed.n_rows, model.latent_dim))
    for start in range(0, processed.n_rows, chunk):
        stop = min(start + chunk, processed.n_rows)
        xb = processed.num[start:stop]
        ohb = [one_hot_matrix(processed.cat[start:stop, i], c)
               for i, c in enumerate(cards)]
        e3 = tokenize_batch(xb, ohb, model.tokenizer)
        mu, logsig = model.encode(e3)
        z = mu.data
        if latent_source == "sample":
            z = z + np.exp(logsig.data) * rng.standard_normal(z.shape)
        out[start:stop] = flatten_latent(z)
    return out
