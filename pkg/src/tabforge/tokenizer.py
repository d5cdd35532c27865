"""Column-wise feature tokenizer/detokenizer for the token matrix E (M x d).

Numerical columns get an affine lift x * w + b into d dims; categorical
columns an embedding lookup expressed as onehot @ W + b. The detokenizer is
the symmetric read-out: a d -> 1 affine head per numerical column and a
d -> C softmax head per categorical column.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import DimensionError

TOKEN_DIM_DEFAULT = 4


class TokenizerParams:
    """Per-column embedding parameters registered in a ParamStore."""

    def __init__(self, store: nn.ParamStore, m_num: int, cardinalities: list[int],
                 d: int, rng: np.random.Generator, prefix: str = "tok"):
        self.d = d
        self.m_num = m_num
        self.cardinalities = list(cardinalities)
        bound = 1.0 / np.sqrt(d)
        self.num_w = [store.create(f"{prefix}.num{i}.w", rng.uniform(-bound, bound, (1, d)))
                      for i in range(m_num)]
        self.num_b = [store.create(f"{prefix}.num{i}.b", np.zeros((1, d)))
                      for i in range(m_num)]
        self.cat_w = [store.create(f"{prefix}.cat{i}.w", rng.uniform(-bound, bound, (c, d)))
                      for i, c in enumerate(self.cardinalities)]
        self.cat_b = [store.create(f"{prefix}.cat{i}.b", np.zeros((1, d)))
                      for i in range(len(self.cardinalities))]

    @property
    def m(self) -> int:
        return self.m_num + len(self.cardinalities)


class DetokenizerParams:
    """Read-out heads, symmetric to the tokenizer."""

    def __init__(self, store: nn.ParamStore, m_num: int, cardinalities: list[int],
                 d: int, rng: np.random.Generator, prefix: str = "detok"):
        self.d = d
        self.m_num = m_num
        self.cardinalities = list(cardinalities)
        bound = 1.0 / np.sqrt(d)
        self.num_w = [store.create(f"{prefix}.num{i}.w", rng.uniform(-bound, bound, (d, 1)))
                      for i in range(m_num)]
        self.num_b = [store.create(f"{prefix}.num{i}.b", np.zeros((1, 1)))
                      for i in range(m_num)]
        self.cat_w = [store.create(f"{prefix}.cat{i}.w", rng.uniform(-bound, bound, (d, c)))
                      for i, c in enumerate(self.cardinalities)]
        self.cat_b = [store.create(f"{prefix}.cat{i}.b", np.zeros((1, c)))
                      for i, c in enumerate(self.cardinalities)]


def tokenize_batch(x_num: np.ndarray, onehots: list[np.ndarray],
                   params: TokenizerParams, tape: nn.Tape | None = None) -> nn.Tensor:
    """Embed a batch: (B, m_num) values + per-column (B, C_i) one-hots -> (B, M, d)."""
    x_num = np.asarray(x_num, dtype=np.float64)
    if x_num.ndim != 2 or x_num.shape[1] != params.m_num:
        raise DimensionError(f"expected (B, {params.m_num}) numericals, got {x_num.shape}")
    if len(onehots) != len(params.cardinalities):
        raise DimensionError("one one-hot block per categorical column required")
    tokens = []
    for i in range(params.m_num):
        col = nn.Tensor(x_num[:, i:i + 1])
        tokens.append(nn.add(nn.matmul(col, params.num_w[i], tape), params.num_b[i], tape))
    for i, c in enumerate(params.cardinalities):
        oh = np.asarray(onehots[i], dtype=np.float64)
        if oh.shape != (x_num.shape[0], c):
            raise DimensionError(
                f"categorical column {i}: one-hot shape {oh.shape} != ({x_num.shape[0]}, {c})")
        tokens.append(nn.add(nn.matmul(nn.Tensor(oh), params.cat_w[i], tape),
                             params.cat_b[i], tape))
    return nn.stack_tokens(tokens, tape)


def tokenize(x_num: np.ndarray, onehots: list[np.ndarray],
             params: TokenizerParams) -> np.ndarray:
    """Single processed row -> token matrix (M, d)."""
    x_num = np.asarray(x_num, dtype=np.float64).reshape(1, -1)
    ohs = [np.asarray(o, dtype=np.float64).reshape(1, -1) for o in onehots]
    return tokenize_batch(x_num, ohs, params).data[0]


def detokenize_batch(e_hat: nn.Tensor, params: DetokenizerParams,
                     tape: nn.Tape | None = None):
    """Read a (B, M, d) token block into per-column heads.

    Returns (num_outputs, cat_logits): lists of (B, 1) and (B, C_i) tensors.
    Softmax is deferred to the caller so training can use the fused
    cross-entropy.
    """
    if e_hat.data.ndim != 3 or e_hat.data.shape[1] != params.m_num + len(params.cardinalities):
        raise DimensionError(f"expected (B, {params.m_num + len(params.cardinalities)}, d), "
                             f"got {e_hat.shape}")
    num_out = []
    for i in range(params.m_num):
        tok = nn.select_token(e_hat, i, tape)
        num_out.append(nn.add(nn.matmul(tok, params.num_w[i], tape), params.num_b[i], tape))
    cat_logits = []
    for i in range(len(params.cardinalities)):
        tok = nn.select_token(e_hat, params.m_num + i, tape)
        cat_logits.append(nn.add(nn.matmul(tok, params.cat_w[i], tape), params.cat_b[i], tape))
    return num_out, cat_logits


def detokenize(e_hat: np.ndarray, params: DetokenizerParams):
    """Token matrix (M, d) -> (numerical values, per-column probability vectors)."""
    block = nn.Tensor(np.asarray(e_hat, dtype=np.float64)[None, :, :])
    num_out, cat_logits = detokenize_batch(block, params)
    nums = np.array([t.data[0, 0] for t in num_out])
    probs = [nn.softmax_last(t).data[0] for t in cat_logits]
    return nums, probs


def argmax_labels(probs: list[np.ndarray]) -> list[int]:
    return [int(np.argmax(p)) for p in probs]


def flatten_latent(z: np.ndarray) -> np.ndarray:
    """Row-major flatten (M, d) -> (M*d,); batched (B, M, d) -> (B, M*d)."""
    z = np.asarray(z)
    if z.ndim == 2:
        return z.reshape(-1)
    if z.ndim == 3:
        return z.reshape(z.shape[0], -1)
    raise DimensionError(f"flatten_latent expects (M, d) or (B, M, d), got {z.shape}")


def unflatten_latent(z: np.ndarray, d: int) -> np.ndarray:
    """Inverse of flatten_latent given the token width d."""
    z = np.asarray(z)
    if z.shape[-1] % d != 0:
        raise DimensionError(f"latent length {z.shape[-1]} not divisible by d={d}")
    m = z.shape[-1] // d
    if z.ndim == 1:
        return z.reshape(m, d)
    if z.ndim == 2:
        return z.reshape(z.shape[0], m, d)
    raise DimensionError(f"unflatten_latent expects 1-D or 2-D input, got {z.shape}")
