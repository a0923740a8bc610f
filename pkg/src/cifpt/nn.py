"""Parameter containers and transformer building blocks on top of autodiff."""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e30


class Module:
    """Minimal parameter registry: tensors with ``requires_grad`` are parameters.

    Parameters and submodules are discovered from instance attributes in
    assignment order, which fixes the naming and iteration order used by
    checkpoints and the optimizer.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns the names loaded."""
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        loaded = []
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {tuple(arr.shape)}")
            p.data = np.array(arr, dtype=np.float64)
            loaded.append(name)
        return loaded

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x) * self.gain + self.shift


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.table = _param(rng.normal(0.0, dim ** -0.5, size=(count, dim)))

    def __call__(self, ids) -> Tensor:
        return ad.take(self.table, ids)


def act(x: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit x*sigmoid(1.702x), a smooth GELU stand-in."""
    return x * ad.sigmoid(x * 1.702)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


def add_positions(x: Tensor) -> Tensor:
    return x + sinusoidal_positions(x.shape[1], x.shape[2])


_DROPOUT: contextvars.ContextVar = contextvars.ContextVar("dropout", default=None)


@contextlib.contextmanager
def dropout_scope(rate: float, rng: np.random.Generator):
    """Enable residual dropout at ``rate`` for forward passes inside the block."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    token = _DROPOUT.set((rate, rng) if rate > 0 else None)
    try:
        yield
    finally:
        _DROPOUT.reset(token)


def dropout(x: Tensor) -> Tensor:
    state = _DROPOUT.get()
    if state is None:
        return x
    rate, rng = state
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal (future positions to hide)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``(B, T, D)`` inputs.

    The key projection has no bias: softmax is invariant to it, so it
    would only contribute a parameter with identically zero gradient.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self._last_weights = None

    def __call__(self, x: Tensor, memory: Tensor, key_mask: np.ndarray | None = None,
                 causal: bool = False) -> Tensor:
        b, tq, d = x.shape
        tk = memory.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).reshape(b, tq, h, dh).transpose(0, 2, 1, 3)
        k = self.k(memory).reshape(b, tk, h, dh).transpose(0, 2, 3, 1)
        v = self.v(memory).reshape(b, tk, h, dh).transpose(0, 2, 1, 3)
        scores = ad.matmul(q, k) * (1.0 / math.sqrt(dh))
        hide = np.zeros((b, 1, tq, tk), dtype=bool)
        if key_mask is not None:
            hide = hide | ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            hide = hide | causal_mask(tq)[None, None]
        if hide.any():
            scores = ad.masked_fill(scores, hide, NEG_INF)
        weights = ad.softmax(scores)
        self._last_weights = weights.data
        ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.o(ctx)

    @property
    def last_weights(self) -> np.ndarray | None:
        """Attention probabilities of the most recent call, ``(B, H, Tq, Tk)``."""
        return self._last_weights


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(act(self.up(x)))


class TransformerLayer(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ffn: int, rng: np.random.Generator,
                 cross: bool = False, causal: bool = False):
        self.causal = causal
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        if cross:
            self.norm_cross = LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, heads, rng)
        else:
            self.cross_attn = None
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, memory: Tensor | None = None,
                 memory_mask: np.ndarray | None = None) -> Tensor:
        y = self.norm_self(x)
        x = x + dropout(self.self_attn(y, y, key_mask=mask, causal=self.causal))
        if self.cross_attn is not None:
            if memory is None:
                raise ValueError("cross-attention layer needs a memory sequence")
            x = x + dropout(self.cross_attn(self.norm_cross(x), memory, key_mask=memory_mask))
        return x + dropout(self.ffn(self.norm_ffn(x)))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``(B, N, D)`` counting only positions where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("masked_mean over an all-masked sequence")
    weights = np.broadcast_to(mask[:, :, None], x.shape).astype(np.float64)
    return (x * weights).sum(axis=1) / counts[:, None].astype(np.float64)
