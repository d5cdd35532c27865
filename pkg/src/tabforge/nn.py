"""Minimal dense-network toolkit: float64 tensors, a gradient tape, and Adam.

All training math runs in 64-bit floats so analytic gradients can be checked
against central finite differences at tight tolerances; model files downcast
to 32-bit at save time. Ops record their backward closures on an explicit
Tape; nothing is differentiated unless a tape is passed, so inference reuses
the same forward code with ``tape=None``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError, StateError


class Tensor:
    """A node in the compute graph: a float64 array plus its gradient slot.

    Leaf tensors created through ParamStore are trainable parameters; every
    op below produces fresh non-leaf tensors. ``grad`` stays None until a
    backward pass touches the node.
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[-1]

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(node: Tensor, g: np.ndarray) -> None:
    # accumulation is always out-of-place, so aliasing an upstream grad is safe
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records forward ops so gradients can be replayed in reverse order."""

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Seed the scalar loss and accumulate grads into every node touched."""
        if not self._ops:
            raise StateError("backward called before any forward op was recorded")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        _accum(loss, np.full_like(loss.data, float(seed)))
        for fn in reversed(self._ops):
            fn()


def backward(tape: Tape, loss: Tensor, seed: float = 1.0) -> None:
    """Reverse-mode pass over `tape`; grads land on the tensors themselves."""
    tape.backward(loss, seed)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad @ b.data.T)
            _accum(b, a.data.T @ out.grad)
        tape.record(bwd)
    return out


def bmm(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Batched matmul on (B, M, K) @ (B, K, N)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[2] != b.data.shape[1]:
        raise DimensionError(f"bmm shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad @ b.data.transpose(0, 2, 1))
            _accum(b, a.data.transpose(0, 2, 1) @ out.grad)
        tape.record(bwd)
    return out


def transpose_last2(a: Tensor, tape: Tape | None = None) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    out = Tensor(a.data.transpose(axes))
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad.transpose(axes))
        tape.record(bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))
        tape.record(bwd)
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data - b.data)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(-out.grad, b.data.shape))
        tape.record(bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * b.data)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))
        tape.record(bwd)
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * c)
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * c)
        tape.record(bwd)
    return out


def add_scalar(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data + c)
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad)
        tape.record(bwd)
    return out


def relu(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    if tape is not None:
        mask = a.data > 0.0
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * mask)
        tape.record(bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor, tape: Tape | None = None) -> Tensor:
    sig = _sigmoid(a.data)
    out = Tensor(a.data * sig)
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * (sig * (1.0 + a.data * (1.0 - sig))))
        tape.record(bwd)
    return out


def exp(a: Tensor, tape: Tape | None = None) -> Tensor:
    ev = np.exp(a.data)
    out = Tensor(ev)
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * ev)
        tape.record(bwd)
    return out


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data.sum())
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, np.full_like(a.data, float(out.grad)))
        tape.record(bwd)
    return out


def mean_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    if tape is not None:
        def bwd():
            if out.grad is not None:
                _accum(a, np.full_like(a.data, float(out.grad) / n))
        tape.record(bwd)
    return out


def reshape(a: Tensor, shape, tape: Tape | None = None) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape {a.shape} -> {tuple(shape)}")
    out = Tensor(a.data.reshape(shape))
    if tape is not None:
        orig = a.data.shape
        def bwd():
            if out.grad is not None:
                _accum(a, out.grad.reshape(orig))
        tape.record(bwd)
    return out


def stack_tokens(parts: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Stack M tensors of shape (B, d) into a (B, M, d) token block."""
    out = Tensor(np.stack([p.data for p in parts], axis=1))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            for i, p in enumerate(parts):
                _accum(p, out.grad[:, i, :])
        tape.record(bwd)
    return out


def select_token(a: Tensor, index: int, tape: Tape | None = None) -> Tensor:
    """Take token `index` from a (B, M, d) block, giving (B, d)."""
    if a.data.ndim != 3:
        raise DimensionError("select_token expects a (B, M, d) tensor")
    out = Tensor(a.data[:, index, :])
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(a.data)
            g[:, index, :] = out.grad
            _accum(a, g)
        tape.record(bwd)
    return out


def softmax_last(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax along the last axis (numerically stabilized)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))
        tape.record(bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               tape: Tape | None = None) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit population variance,
    then scale by gamma and shift by beta."""
    d = x.data.shape[-1]
    if gamma.data.size != d or beta.data.size != d:
        raise DimensionError(f"layer_norm affine params must have length {d}")
    if eps < 0:
        raise DimensionError("layer_norm eps must be non-negative")
    g = gamma.data.reshape(-1)
    b = beta.data.reshape(-1)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * g + b)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            go = out.grad
            dxhat = go * g
            # d/dx of (x - mu) / sqrt(var + eps) with population variance
            dx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)
            axes = tuple(range(go.ndim - 1))
            _accum(gamma, (go * xhat).sum(axis=axes).reshape(gamma.data.shape))
            _accum(beta, go.sum(axis=axes).reshape(beta.data.shape))
        tape.record(bwd)
    return out


def softmax_cross_entropy(logits: Tensor, onehot: np.ndarray,
                          tape: Tape | None = None) -> Tensor:
    """Per-row cross-entropy between softmax(logits) and one-hot targets.

    Returns a (B, 1) tensor of losses; fused so the backward pass is the
    stable ``softmax - onehot`` form.
    """
    if logits.data.shape != onehot.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {onehot.shape}")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    loss = lse - (z * onehot).sum(axis=-1, keepdims=True)
    out = Tensor(loss)
    if tape is not None:
        sm = np.exp(z - lse)
        def bwd():
            if out.grad is not None:
                _accum(logits, out.grad * (sm - onehot))
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# layer-level ops


def dense_forward(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """y = x @ w + b with the bias row broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(f"dense_forward shapes {x.shape} x {w.shape}")
    if b.data.size != w.data.shape[1]:
        raise DimensionError(f"bias length {b.data.size} != {w.data.shape[1]}")
    return add(matmul(x, w, tape), b, tape)


def self_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                   tape: Tape | None = None, return_weights: bool = False):
    """Single-head attention softmax(QK^T / sqrt(d)) V on one (M, d) matrix."""
    if h.data.ndim != 2:
        raise DimensionError("self_attention expects an (M, d) matrix")
    d = h.data.shape[1]
    for w in (wq, wk, wv):
        if w.data.shape != (d, d):
            raise DimensionError(f"projection must be ({d}, {d}), got {w.shape}")
    q = matmul(h, wq, tape)
    k = matmul(h, wk, tape)
    v = matmul(h, wv, tape)
    scores = scale(matmul(q, transpose_last2(k, tape), tape), 1.0 / math.sqrt(d), tape)
    weights = softmax_last(scores, tape)
    out = matmul(weights, v, tape)
    if return_weights:
        return out, weights
    return out


def self_attention_batched(h3: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                           tape: Tape | None = None) -> Tensor:
    """Attention over a (B, M, d) block; weights are shared across the batch."""
    if h3.data.ndim != 3:
        raise DimensionError("self_attention_batched expects (B, M, d)")
    bsz, m, d = h3.data.shape
    flat = reshape(h3, (bsz * m, d), tape)
    q = reshape(matmul(flat, wq, tape), (bsz, m, d), tape)
    k = reshape(matmul(flat, wk, tape), (bsz, m, d), tape)
    v = reshape(matmul(flat, wv, tape), (bsz, m, d), tape)
    scores = scale(bmm(q, transpose_last2(k, tape), tape), 1.0 / math.sqrt(d), tape)
    weights = softmax_last(scores, tape)
    return bmm(weights, v, tape)


# ---------------------------------------------------------------------------
# parameters and Adam


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, data) -> Tensor:
        if name in self.params:
            raise StateError(f"parameter {name!r} already registered")
        p = Tensor(np.array(data, dtype=np.float64), name=name)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Accumulated grads per parameter; untouched parameters get zeros."""
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in values:
                raise StateError(f"missing parameter {name!r} in loaded values")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Standard bias-corrected Adam update; increments the shared step counter."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name!r}: {g.shape} != {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
