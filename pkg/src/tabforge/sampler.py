"""Reverse-process solvers and the latent -> table generation pipeline.

One Euler step of either the probability-flow ODE or the reverse SDE
(Euler-Maruyama), iterated over a rho-spaced descending time grid whose last
entry is exactly t = 0. Generation runs in fixed-size row chunks with
per-chunk derived seeds, so results are byte-identical regardless of the
thread count used to execute the chunks.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import nn
from .diffusion import DiffusionModel, NoiseSchedule, score_from_eps
from .errors import CompatibilityError, InputError
from .tableio import PreprocessState, Table, TableSchema, invert_preprocess
from .tokenizer import detokenize_batch, unflatten_latent
from .vae import VaeModel

N_STEPS_DEFAULT = 20
RHO_DEFAULT = 7.0
CHUNK_ROWS = 512


def time_grid(n_steps: int, sigma_min: float, sigma_max: float,
              rho: float = RHO_DEFAULT) -> np.ndarray:
    """Descending noise levels sigma_max ... sigma_min followed by exactly 0."""
    if n_steps < 1:
        raise InputError("need at least one reverse step")
    if n_steps == 1:
        return np.array([sigma_max, 0.0])
    i = np.arange(n_steps)
    inv_rho = 1.0 / rho
    grid = (sigma_max ** inv_rho
            + i / (n_steps - 1) * (sigma_min ** inv_rho - sigma_max ** inv_rho)) ** rho
    return np.append(grid, 0.0)


def reverse_step(z_t: np.ndarray, t_hi: float, t_lo: float, eps_fn,
                 schedule: NoiseSchedule, mode: str = "ode",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """One Euler step from noise level t_hi down to t_lo.

    eps_fn(z, t) is the noise predictor; the score is -eps_fn/sigma(t_hi).
    ODE: dz = -sigma_dot*sigma*score dt. SDE adds the doubled drift and the
    sqrt(2*sigma_dot*sigma) noise term of the reverse SDE.
    """
    if t_hi <= t_lo:
        raise InputError(f"reverse step needs t_hi > t_lo, got {t_hi} <= {t_lo}")
    z_t = np.asarray(z_t, dtype=np.float64)
    score = score_from_eps(eps_fn(z_t, t_hi), t_hi, schedule)
    dt = t_lo - t_hi  # negative
    sds = schedule.sigma_dot(t_hi) * schedule.sigma(t_hi)
    if mode == "ode":
        return z_t - dt * sds * score
    if mode == "sde":
        if rng is None:
            raise InputError("sde mode needs a random generator")
        noise = rng.standard_normal(z_t.shape)
        return (z_t - dt * 2.0 * sds * score
                + schedule.g(t_hi) * np.sqrt(-dt) * noise)
    raise InputError(f"unknown sampler mode {mode!r}")


def reverse_trajectory(z: np.ndarray, grid: np.ndarray, eps_fn,
                       schedule: NoiseSchedule, mode: str,
                       rng: np.random.Generator | None) -> np.ndarray:
    for i in range(len(grid) - 1):
        z = reverse_step(z, grid[i], grid[i + 1], eps_fn, schedule, mode, rng)
    return z


def max_threads() -> int:
    raw = os.environ.get("TABFORGE_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def decode_latents(vae: VaeModel, z_flat: np.ndarray, state: PreprocessState,
                   schema: TableSchema, argmax_cats: bool = True,
                   rng: np.random.Generator | None = None) -> Table:
    """Latent rows (B, M*d) -> processed Table via decoder + detokenizer."""
    z3 = unflatten_latent(z_flat, vae.d)
    e_hat = vae.decode(z3)
    num_out, cat_logits = detokenize_batch(e_hat, vae.detokenizer)
    num = (np.hstack([t.data for t in num_out])
           if num_out else np.zeros((z_flat.shape[0], 0)))
    cat = np.zeros((z_flat.shape[0], len(cat_logits)), dtype=np.int64)
    for i, logits in enumerate(cat_logits):
        probs = nn.softmax_last(logits).data
        if argmax_cats:
            cat[:, i] = probs.argmax(axis=1)
        else:
            if rng is None:
                raise InputError("stochastic decode needs a random generator")
            cum = probs.cumsum(axis=1)
            draws = rng.random((probs.shape[0], 1))
            cat[:, i] = (draws > cum).sum(axis=1)
    labels = [list(s.labels) for s in state.categorical]
    return Table(schema, num, cat, labels)


def check_same_schema(vae: VaeModel, diffusion: DiffusionModel) -> None:
    if vae.latent_dim != diffusion.latent_dim:
        raise CompatibilityError(
            f"vae latent width {vae.latent_dim} != diffusion width "
            f"{diffusion.latent_dim}; models were trained on different schemas")


def generate(vae: VaeModel, diffusion: DiffusionModel, state: PreprocessState,
             schema: TableSchema, n_rows: int, n_steps: int = N_STEPS_DEFAULT,
             mode: str = "ode", seed: int = 0, rho: float = RHO_DEFAULT,
             argmax_cats: bool = True) -> Table:
    """Sample n_rows synthetic rows: prior draw at sigma_max, reverse steps,
    decode, detokenize, invert preprocessing."""
    check_same_schema(vae, diffusion)
    if n_rows < 0:
        raise InputError("row count must be non-negative")
    schedule = diffusion.schedule
    grid = time_grid(n_steps, schedule.sigma_min, schedule.sigma_max, rho)

    n_chunks = max(1, -(-n_rows // CHUNK_ROWS))
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)

    def run_chunk(c: int) -> np.ndarray:
        lo = c * CHUNK_ROWS
        hi = min(lo + CHUNK_ROWS, n_rows)
        if hi <= lo:
            return np.zeros((0, diffusion.latent_dim))
        rng = np.random.default_rng(seeds[c])
        z = rng.standard_normal((hi - lo, diffusion.latent_dim)) * schedule.sigma(grid[0])
        return reverse_trajectory(z, grid, diffusion.denoise_eps, schedule, mode, rng)

    workers = max_threads()
    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_chunk, range(n_chunks)))
    else:
        chunks = [run_chunk(c) for c in range(n_chunks)]
    z0 = np.vstack(chunks) if n_rows else np.zeros((0, diffusion.latent_dim))

    decode_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A]))
    processed = decode_latents(vae, diffusion.denormalize(z0), state, schema,
                               argmax_cats, decode_rng)
    return invert_preprocess(processed, state)
