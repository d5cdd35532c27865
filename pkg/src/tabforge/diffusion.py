"""Variance-exploding latent diffusion: linear noise schedule, denoising MLP,
and the epsilon-matching training objective.

Forward process: z_t = z_0 + sigma(t) * eps with sigma(t) = t, so the
perturbation kernel is N(z_0, t^2 I) and the score is -eps_hat / sigma(t).
Latents are standardized per dimension before training and de-standardized
after sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import DimensionError, DomainError, InputError, NumericError

SIGMA_MIN_DEFAULT = 0.002
SIGMA_MAX_DEFAULT = 80.0
P_MEAN_DEFAULT = -1.2
P_STD_DEFAULT = 1.2
STD_FLOOR = 1e-6


class NoiseSchedule:
    """sigma(t) = t with s(t) = 1: noise is added directly to the data."""

    kind = "ve-linear"

    def __init__(self, sigma_min: float = SIGMA_MIN_DEFAULT,
                 sigma_max: float = SIGMA_MAX_DEFAULT):
        if not (0 < sigma_min < sigma_max):
            raise InputError("need 0 < sigma_min < sigma_max")
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max

    def sigma(self, t: float) -> float:
        if t < 0:
            raise DomainError(f"noise level undefined for negative time {t}")
        return float(t)

    def sigma_dot(self, t: float) -> float:
        return 1.0

    def g(self, t: float) -> float:
        """Diffusion coefficient sqrt(2 * sigma_dot * sigma) of the reverse SDE."""
        return math.sqrt(2.0 * self.sigma_dot(t) * self.sigma(t))


def perturb(z0: np.ndarray, t: float, eps: np.ndarray,
            schedule: NoiseSchedule) -> np.ndarray:
    """Forward process draw z_t = z0 + sigma(t) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionError(f"perturb shapes {z0.shape} vs {eps.shape}")
    return z0 + schedule.sigma(t) * eps


def sample_time(rng: np.random.Generator, schedule: NoiseSchedule,
                p_mean: float = P_MEAN_DEFAULT, p_std: float = P_STD_DEFAULT,
                size=None) -> np.ndarray | float:
    """Log-normal noise-level draws exp(N(p_mean, p_std^2)), clipped to the
    schedule's [sigma_min, sigma_max] support."""
    t = np.exp(rng.normal(p_mean, p_std, size=size))
    return np.clip(t, schedule.sigma_min, schedule.sigma_max)


def score_from_eps(eps_hat: np.ndarray, t: float,
                   schedule: NoiseSchedule) -> np.ndarray:
    """Score estimate -eps_hat / sigma(t); undefined at t = 0."""
    sigma = schedule.sigma(t)
    if sigma <= 0:
        raise DomainError("score undefined at sigma = 0")
    return -np.asarray(eps_hat, dtype=np.float64) / sigma


def time_embedding(t, hidden: int) -> np.ndarray:
    """Sinusoidal embedding of log sigma over a geometric frequency ladder.

    Frequencies run from 1 down to 1e-4 in `hidden // 2` geometric steps, i.e.
    periods spanning 2*pi to 2*pi*1e4 in log-sigma units.
    """
    if hidden % 2 != 0:
        raise DimensionError("time embedding width must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t <= 0):
        raise DomainError("time embedding requires positive noise levels")
    half = hidden // 2
    k = np.arange(half)
    freqs = np.exp(-math.log(1e4) * k / max(half - 1, 1))
    phase = np.log(t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


class DenoiserMlp:
    """Noise predictor: FC_in -> (+ time embedding) -> 3 SiLU layers -> FC_out.

    Hidden widths follow the hidden - 2*hidden - 2*hidden - hidden ladder.
    """

    def __init__(self, in_dim: int, hidden: int, seed: int = 0):
        if hidden % 2 != 0:
            raise DimensionError("hidden width must be even for the time embedding")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1FF]))
        self.in_dim = in_dim
        self.hidden = hidden
        self.store = nn.ParamStore()

        def lin(name, n_in, n_out):
            bound = 1.0 / math.sqrt(n_in)
            w = self.store.create(f"{name}.w", rng.uniform(-bound, bound, (n_in, n_out)))
            b = self.store.create(f"{name}.b", np.zeros((1, n_out)))
            return w, b

        self.fc_in = lin("fc_in", in_dim, hidden)
        self.fc1 = lin("fc1", hidden, 2 * hidden)
        self.fc2 = lin("fc2", 2 * hidden, 2 * hidden)
        self.fc3 = lin("fc3", 2 * hidden, hidden)
        self.fc_out = lin("fc_out", hidden, in_dim)

    def forward(self, z: np.ndarray | nn.Tensor, t, tape: nn.Tape | None = None) -> nn.Tensor:
        zt = z if isinstance(z, nn.Tensor) else nn.Tensor(np.atleast_2d(z))
        if zt.data.ndim != 2 or zt.data.shape[1] != self.in_dim:
            raise DimensionError(f"denoiser expects (B, {self.in_dim}), got {zt.shape}")
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)),
                                (zt.data.shape[0],))
        emb = nn.Tensor(time_embedding(t_arr, self.hidden))
        h = nn.add(nn.dense_forward(zt, *self.fc_in, tape), emb, tape)
        h = nn.silu(nn.dense_forward(h, *self.fc1, tape), tape)
        h = nn.silu(nn.dense_forward(h, *self.fc2, tape), tape)
        h = nn.silu(nn.dense_forward(h, *self.fc3, tape), tape)
        out = nn.dense_forward(h, *self.fc_out, tape)
        return nn.check_finite(out, "denoiser output")


@dataclass
class DiffusionConfig:
    hidden: int = 1024
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: bool = True  # linear ramp of lr to 0 over the run
    sigma_min: float = SIGMA_MIN_DEFAULT
    sigma_max: float = SIGMA_MAX_DEFAULT
    p_mean: float = P_MEAN_DEFAULT
    p_std: float = P_STD_DEFAULT

    def validate(self):
        if self.hidden < 2 or self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise InputError("diffusion config values must be positive")
        if self.p_std <= 0:
            raise InputError("p_std must be positive")
        NoiseSchedule(self.sigma_min, self.sigma_max)
        return self


class DiffusionModel:
    """Trained denoiser plus its schedule and latent normalization constants."""

    def __init__(self, mlp: DenoiserMlp, schedule: NoiseSchedule,
                 mean: np.ndarray, std: np.ndarray):
        self.mlp = mlp
        self.schedule = schedule
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape or self.mean.size != mlp.in_dim:
            raise DimensionError("normalization constants must match the latent width")
        if np.any(self.std <= 0):
            raise InputError("normalization std must be positive")

    @property
    def latent_dim(self) -> int:
        return self.mlp.in_dim

    def normalize(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def denoise_eps(self, z_t: np.ndarray, t) -> np.ndarray:
        """Predicted noise for normalized latents z_t at noise level t."""
        return self.mlp.forward(z_t, t).data


def diffusion_loss(z0: np.ndarray, rng: np.random.Generator, mlp: DenoiserMlp,
                   schedule: NoiseSchedule, p_mean: float = P_MEAN_DEFAULT,
                   p_std: float = P_STD_DEFAULT, tape: nn.Tape | None = None) -> nn.Tensor:
    """Denoising score matching: mean over the batch of ||eps_hat - eps||^2
    with per-sample noise levels t ~ p(t) and eps ~ N(0, I)."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    if z0.shape[0] == 0:
        raise InputError("diffusion loss needs a nonempty batch")
    bsz = z0.shape[0]
    t = sample_time(rng, schedule, p_mean, p_std, size=bsz)
    eps = rng.standard_normal(z0.shape)
    z_t = z0 + t[:, None] * eps
    eps_hat = mlp.forward(z_t, t, tape)
    diff = nn.sub(eps_hat, nn.Tensor(eps), tape)
    return nn.scale(nn.sum_all(nn.mul(diff, diff, tape), tape), 1.0 / bsz, tape)


def train_diffusion(latents: np.ndarray, config: DiffusionConfig, seed: int = 0):
    """Fit the denoiser on flattened latent rows.

    Returns (model, history) where history holds (step, loss) rows. The
    latents are standardized per dimension (std floored at 1e-6) and batches
    are drawn with replacement from a seeded generator.
    """
    config.validate()
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    n = latents.shape[0]
    if n == 0:
        raise InputError("no latents to train on")

    mean = latents.mean(axis=0)
    std = np.maximum(latents.std(axis=0), STD_FLOOR)
    z = (latents - mean) / std

    schedule = NoiseSchedule(config.sigma_min, config.sigma_max)
    mlp = DenoiserMlp(latents.shape[1], config.hidden, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1FF, 1]))
    batch = min(config.batch_size, n)

    history = []
    for step in range(config.steps):
        lr = config.lr * (1.0 - step / config.steps) if config.lr_decay else config.lr
        idx = rng.integers(0, n, size=batch)
        tape = nn.Tape()
        mlp.store.zero_grads()
        loss = diffusion_loss(z[idx], rng, mlp, schedule, config.p_mean,
                              config.p_std, tape)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"diffusion training diverged at step {step}")
        nn.backward(tape, loss)
        nn.adam_step(mlp.store, mlp.store.gradients(), lr)
        history.append((step, value))

    return DiffusionModel(mlp, schedule, mean, std), history
