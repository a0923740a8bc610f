"""Continuous integrate-and-fire: frame-level states to token-level vectors.

Integration is computed in closed form. With ``S_t`` the running sum of
firing weights, frame ``t`` owns the mass interval ``[S_{t-1}, S_t)`` and
token ``i`` owns ``[i*beta, (i+1)*beta)``. The weight of frame ``t`` in
token ``i`` is the length of the overlap of the two intervals, which is
exactly what sequential accumulate-split-carry produces, including
several firings inside one frame.

Which end of each overlap is a running sum and which is a token boundary
(the *schedule*) is decided from the forward values and then held fixed,
so gradients flow through the continuous weights only.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module

_FIRE_EPS = 1e-9


@dataclass
class CifConfig:
    beta: float = 1.0
    tail_fire_threshold: float = 0.5
    scaling_enabled: bool = True
    hidden_dim: int = 64

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0.0 < self.tail_fire_threshold < 1.0:
            raise ValueError("tail_fire_threshold must lie in (0, 1)")


@dataclass
class CifSchedule:
    """Frozen firing decisions for one batch: which overlap ends are sums."""

    upper_is_sum: np.ndarray   # (B, N, T) bool
    lower_is_sum: np.ndarray   # (B, N, T) bool
    active: np.ndarray         # (B, N, T) bool
    counts: np.ndarray         # (B,) emitted tokens
    tail: np.ndarray           # (B,) last token fired from the residual


@dataclass
class CifOutput:
    tokens: Tensor             # c, (B, N, D)
    weight_matrix: Tensor      # W, (B, N, T) with c = W @ h
    token_mask: np.ndarray     # (B, N)
    fired_via_tail: np.ndarray  # (B,)
    schedule: CifSchedule

    @property
    def counts(self) -> np.ndarray:
        return self.schedule.counts


# Replay support for finite-difference checks: the first pass through
# integrate_fire records schedules, later passes re-use them in order.
_REPLAY: contextvars.ContextVar = contextvars.ContextVar("cif_replay", default=None)


@contextlib.contextmanager
def schedule_replay():
    """Hold firing schedules fixed across repeated forward passes.

    Inside the block, every forward pass must call ``integrate_fire`` the
    same number of times in the same order.
    """
    state = {"recorded": [], "cursor": 0, "recording": True}
    token = _REPLAY.set(state)
    try:
        yield state
    finally:
        _REPLAY.reset(token)


def next_replay_pass() -> None:
    state = _REPLAY.get()
    if state is not None:
        state["recording"] = False
        state["cursor"] = 0


class WeightEstimator(Module):
    """alpha = sigmoid(linear(conv1d(h))), kernel 3, same padding."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.conv = Linear(3 * dim, dim, rng)
        self.proj = Linear(dim, 1, rng)

    def __call__(self, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
        squeeze = h.ndim == 2
        if squeeze:
            h = h.reshape(1, *h.shape)
        b, t, d = h.shape
        if t == 0:
            raise ValueError("cannot estimate weights for an empty sequence")
        if mask is None:
            mask = np.ones((b, t), dtype=bool)
        h = ad.masked_fill(h, ~mask[:, :, None], 0.0)
        pad = np.zeros((b, 1, d))
        left = ad.concat([pad, h[:, : t - 1]], axis=1)
        right = ad.concat([h[:, 1:], pad], axis=1)
        window = ad.concat([left, h, right], axis=2)
        z = self.proj(self.conv(window)).reshape(b, t)
        alpha = ad.masked_fill(ad.sigmoid(z), ~mask, 0.0)
        return alpha.reshape(t) if squeeze else alpha


def estimate_weights(h: Tensor, estimator: WeightEstimator, mask: np.ndarray | None = None) -> Tensor:
    return estimator(h, mask)


def scale_weights(alpha: Tensor, target_counts, mask: np.ndarray | None = None) -> Tensor:
    """Rescale each row of ``alpha`` so it sums to its target token count.

    The last valid element of every row absorbs the floating-point residue
    so that ``alpha.sum(-1)`` reproduces the targets to the last bit where
    possible (within 1e-12 otherwise).
    """
    squeeze = alpha.ndim == 1
    if squeeze:
        alpha = alpha.reshape(1, alpha.shape[0])
    counts = np.atleast_1d(np.asarray(target_counts, dtype=np.float64))
    if (counts < 1).any():
        raise ValueError("target token count must be >= 1")
    totals = alpha.data.sum(axis=1)
    if (totals <= 0).any():
        raise ValueError("cannot scale all-zero firing weights")
    b, t = alpha.shape
    if mask is None:
        mask = np.ones((b, t), dtype=bool)
    total = alpha.sum(axis=1, keepdims=True)
    scaled = alpha * expand_col(counts[:, None] / total, t)
    residue = np.zeros((b, t))
    last = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
    residue[np.arange(b), last] = counts - scaled.data.sum(axis=1)
    scaled = scaled + residue
    return scaled.reshape(t) if squeeze else scaled


def expand_col(col, width: int) -> Tensor:
    """Broadcast a ``(B, 1)`` tensor to ``(B, width)``."""
    col = col if isinstance(col, Tensor) else Tensor(col)
    return ad.expand(col, (col.shape[0], width))


def _plan(sums: np.ndarray, prev: np.ndarray, mask: np.ndarray, cfg: CifConfig,
          max_tokens: int | None, min_tokens: int) -> CifSchedule:
    beta = cfg.beta
    b, t = sums.shape
    total = sums[:, -1] if t else np.zeros(b)
    full = np.floor(total / beta + _FIRE_EPS).astype(np.int64)
    residual = total - full * beta
    tail = residual >= cfg.tail_fire_threshold * beta
    counts = full + tail.astype(np.int64)
    if min_tokens:
        forced = (counts < min_tokens) & (total > 0)
        tail = tail | forced
        counts = np.maximum(counts, np.where(total > 0, min_tokens, 0))
    n = int(counts.max()) if max_tokens is None else max_tokens
    n = max(n, 1)
    idx = np.arange(n, dtype=np.float64)[None, :, None]
    upper = (idx + 1) * beta
    lower = idx * beta
    s = sums[:, None, :]
    sp = prev[:, None, :]
    upper_is_sum = s < upper
    lower_is_sum = sp > lower
    length = np.where(upper_is_sum, s, upper) - np.where(lower_is_sum, sp, lower)
    live_row = np.arange(n)[None, :] < counts[:, None]
    active = (length > 0) & live_row[:, :, None] & mask[:, None, :]
    return CifSchedule(upper_is_sum, lower_is_sum, active, counts, tail & (counts > 0))


def integrate_fire(h: Tensor, alpha: Tensor, cfg: CifConfig, mask: np.ndarray | None = None,
                   max_tokens: int | None = None, min_tokens: int = 0,
                   schedule: CifSchedule | None = None) -> CifOutput:
    """Integrate frames ``h`` (``(B, T, D)`` or ``(T, D)``) with weights ``alpha``.

    Args:
        max_tokens: pad the token axis to this length (defaults to the
            largest emitted count in the batch).
        min_tokens: in inference, emit the residual as a token when fewer
            than this many would fire.
        schedule: re-use firing decisions instead of deriving them.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
        alpha = alpha.reshape(1, alpha.shape[0])
    b, t, _ = h.shape
    if alpha.shape != (b, t):
        raise ValueError(f"alpha shape {alpha.shape} does not match frames {h.shape[:2]}")
    if mask is None:
        mask = np.ones((b, t), dtype=bool)

    tri = np.triu(np.ones((t, t)))
    sums = ad.matmul(alpha, tri)
    prev = sums - alpha

    replay = _REPLAY.get()
    if schedule is None and replay is not None and not replay["recording"]:
        schedule = replay["recorded"][replay["cursor"]]
        replay["cursor"] += 1
    if schedule is None:
        schedule = _plan(sums.data, prev.data, mask, cfg, max_tokens, min_tokens)
        if replay is not None and replay["recording"]:
            replay["recorded"].append(schedule)

    n = schedule.active.shape[1]
    beta = cfg.beta
    idx = np.arange(n, dtype=np.float64)[None, :, None]
    act = schedule.active
    up_s = act & schedule.upper_is_sum
    lo_s = act & schedule.lower_is_sum
    const = (np.where(act & ~schedule.upper_is_sum, (idx + 1) * beta, 0.0)
             - np.where(act & ~schedule.lower_is_sum, idx * beta, 0.0))

    sums_e = ad.expand(sums.reshape(b, 1, t), (b, n, t))
    prev_e = ad.expand(prev.reshape(b, 1, t), (b, n, t))
    weights = sums_e * up_s.astype(np.float64) - prev_e * lo_s.astype(np.float64) + const
    tokens = ad.matmul(weights, h)
    token_mask = np.arange(n)[None, :] < schedule.counts[:, None]
    out = CifOutput(tokens, weights, token_mask, schedule.tail.copy(), schedule)
    if squeeze:
        out.tokens = tokens.reshape(n, h.shape[2])
        out.weight_matrix = weights.reshape(n, t)
        out.token_mask = token_mask[0]
        out.fired_via_tail = schedule.tail[:1].copy()
    return out


def quantity_loss(alpha: Tensor, target_counts) -> Tensor:
    """Mean over utterances of ``|sum(alpha) - N|`` on unscaled weights."""
    if alpha.ndim == 1:
        alpha = alpha.reshape(1, alpha.shape[0])
    counts = np.atleast_1d(np.asarray(target_counts, dtype=np.float64))
    diff = alpha.sum(axis=1) - counts
    return ad.abs_(diff).mean()


def expected_token_count(alpha: np.ndarray, cfg: CifConfig) -> int:
    """Tokens fired in inference mode for a single unscaled weight vector."""
    total = float(np.sum(alpha))
    full = math.floor(total / cfg.beta + _FIRE_EPS)
    return full + int(total - full * cfg.beta >= cfg.tail_fire_threshold * cfg.beta)
