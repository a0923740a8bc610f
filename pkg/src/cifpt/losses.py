"""Training objectives for CIF pre-training and SLU fine-tuning.

Every batched loss is the mean over utterances of a per-utterance mean, so
a padded batch scores the same as averaging its utterances one by one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LMD_KINDS = ("mse", "smooth_l1", "contrastive", "none")
_NEG = -1e30


@dataclass
class LossWeights:
    lambda1: float = 0.5      # CTC
    lambda2: float = 1.0      # quantity
    lambda_lmd: float = 0.1   # distillation
    gamma: float = 1.0        # smoothed-L1 transition
    tau: float = 0.01         # contrastive temperature
    lmd_kind: str = "contrastive"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_lmd) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma <= 0 or self.tau <= 0:
            raise ValueError("gamma and tau must be positive")
        if self.lmd_kind not in LMD_KINDS:
            raise ValueError(f"lmd_kind must be one of {LMD_KINDS}")


def _batched(x: Tensor, mask) -> tuple[Tensor, np.ndarray, bool]:
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(x.shape[:2])
    return x, mask, squeeze


def _utterance_mean(per_pos: Tensor, mask: np.ndarray) -> Tensor:
    """Per-utterance mean over valid positions of ``(B, N)``, then batch mean."""
    counts = mask.sum(axis=1).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("utterance with no valid positions")
    per_utt = (per_pos * mask.astype(np.float64)).sum(axis=1) / counts
    return per_utt.mean()


def ce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Cross-entropy of ``(B, N, V)`` logits against ``(B, N)`` integer targets."""
    logits, mask, _ = _batched(logits, mask)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
    if targets.shape != logits.shape[:2]:
        raise ValueError(f"targets {targets.shape} do not align with logits {logits.shape[:2]}")
    onehot = np.zeros(logits.shape)
    safe = np.where(mask, targets, 0)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    nll = -(ad.log_softmax(logits) * onehot).sum(axis=-1)
    return _utterance_mean(nll, mask)


def ctc_min_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank per repeat."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(frame_logits: Tensor, targets, frame_lengths=None, target_lengths=None,
             blank: int | None = None) -> Tensor:
    """CTC negative log-likelihood by the log-space forward recursion.

    ``frame_logits`` is ``(B, T, C)`` (or ``(T, C)``) with the blank at
    index ``C - 1`` unless ``blank`` says otherwise. Targets are ``(B, L)``
    padded label ids.
    """
    if frame_logits.ndim == 2:
        frame_logits = frame_logits.reshape(1, *frame_logits.shape)
        targets = np.asarray(targets, dtype=np.int64).reshape(1, -1)
    b, t_max, c = frame_logits.shape
    blank = c - 1 if blank is None else blank
    targets = np.asarray(targets, dtype=np.int64).reshape(b, -1)
    frame_lengths = np.full(b, t_max) if frame_lengths is None else np.asarray(frame_lengths)
    target_lengths = np.full(b, targets.shape[1]) if target_lengths is None else np.asarray(target_lengths)
    for i in range(b):
        need = ctc_min_frames(targets[i, : target_lengths[i]])
        if need > frame_lengths[i]:
            raise ValueError(
                f"utterance {i}: target needs {need} frames but only {frame_lengths[i]} available"
            )

    l_max = targets.shape[1]
    s = 2 * l_max + 1
    ext = np.full((b, s), blank, dtype=np.int64)
    ext[:, 1::2] = targets
    s_len = 2 * target_lengths + 1
    valid_state = np.arange(s)[None, :] < s_len[:, None]
    skip_ok = np.zeros((b, s), dtype=bool)
    skip_ok[:, 3::2] = ext[:, 3::2] != ext[:, 1:-2:2]

    lp = ad.log_softmax(frame_logits)
    flat_idx = (np.arange(b)[:, None, None] * t_max * c
                + np.arange(t_max)[None, :, None] * c
                + ext[:, None, :])
    emit = ad.take(lp.reshape(b * t_max * c, 1), flat_idx).reshape(b, t_max, s)

    start = np.zeros((b, s), dtype=bool)
    start[:, :2] = True
    alpha = ad.masked_fill(emit[:, 0], ~(start & valid_state), _NEG)
    neg_col = np.full((b, 1), _NEG)
    neg_two = np.full((b, 2), _NEG)
    for t in range(1, t_max):
        stay = alpha
        step = ad.concat([neg_col, alpha[:, : s - 1]], axis=1)
        jump = ad.masked_fill(ad.concat([neg_two, alpha[:, : s - 2]], axis=1), ~skip_ok, _NEG)
        nxt = ad.logsumexp([stay, step, jump]) + emit[:, t]
        nxt = ad.masked_fill(nxt, ~valid_state, _NEG)
        live = (t < frame_lengths)[:, None]
        if live.all():
            alpha = nxt
        else:
            keep = np.broadcast_to(live, (b, s)).astype(np.float64)
            alpha = nxt * keep + alpha * (1.0 - keep)

    last = np.zeros((b, s), dtype=bool)
    last[np.arange(b), s_len - 1] = True
    last[np.arange(b), s_len - 2] = True
    final = ad.masked_fill(alpha, ~last, _NEG)
    shift = final.data.max(axis=1, keepdims=True)
    ll = ad.log(ad.exp(final - shift).sum(axis=1)) + shift[:, 0]
    return (-ll).mean()


def lmd_mse(teacher: Tensor, student: Tensor, mask=None) -> Tensor:
    """Mean over tokens of ``||h_t - c||^2``."""
    student, mask, _ = _batched(student, mask)
    teacher = _as_const(teacher).reshape(student.shape)
    if teacher.shape != student.shape:
        raise ValueError("teacher and student shapes differ")
    d = teacher - student
    return _utterance_mean((d * d).sum(axis=-1), mask)


def smooth_l1_elementwise(d: Tensor, gamma: float) -> Tensor:
    quad = np.abs(d.data) <= gamma
    sq = d * d * (0.5 / gamma)
    lin = ad.abs_(d) - 0.5 * gamma
    return sq * quad.astype(np.float64) + lin * (~quad).astype(np.float64)


def lmd_smooth_l1(teacher: Tensor, student: Tensor, gamma: float = 1.0, mask=None) -> Tensor:
    """Elementwise smoothed L1 averaged over unmasked elements."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    student, mask, _ = _batched(student, mask)
    teacher = _as_const(teacher).reshape(student.shape)
    if teacher.shape != student.shape:
        raise ValueError("teacher and student shapes differ")
    per_pos = smooth_l1_elementwise(teacher - student, gamma).mean(axis=-1)
    return _utterance_mean(per_pos, mask)


def _unit_rows(x: Tensor) -> Tensor:
    norm = ad.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-24)
    return x / ad.expand(norm, x.shape)


def contrastive_from_similarity(sim: Tensor, tau: float) -> Tensor:
    """InfoNCE over a square similarity matrix whose diagonal holds positives."""
    m = sim.shape[0]
    logp = ad.log_softmax(sim * (1.0 / tau))
    return -(logp * np.eye(m)).sum() * (1.0 / m)


def lmd_contrastive(teacher: Tensor, student: Tensor, tau: float = 0.01, mask=None) -> Tensor:
    """Contrastive distillation with every unmasked student vector in the batch as a candidate."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    student, mask, _ = _batched(student, mask)
    teacher = _as_const(teacher).reshape(student.shape)
    d = student.shape[-1]
    rows = np.flatnonzero(mask.reshape(-1))
    c = ad.take(student.reshape(-1, d), rows)
    h = ad.take(teacher.reshape(-1, d), rows)
    sim = ad.matmul(_unit_rows(h), _unit_rows(c).transpose(1, 0))
    return contrastive_from_similarity(sim, tau)


def lmd_loss(kind: str, teacher: Tensor, student: Tensor, weights: LossWeights, mask=None) -> Tensor:
    if kind == "mse":
        return lmd_mse(teacher, student, mask)
    if kind == "smooth_l1":
        return lmd_smooth_l1(teacher, student, weights.gamma, mask)
    if kind == "contrastive":
        return lmd_contrastive(teacher, student, weights.tau, mask)
    raise ValueError(f"no distillation loss for kind {kind!r}")


def cif_total_loss(ce, ctc, qua, lmd, w: LossWeights):
    """ce + lambda1*ctc + lambda2*qua + lambda*lmd; lmd is ignored when lmd_kind is 'none'."""
    total = ce + ctc * w.lambda1 + qua * w.lambda2
    if w.lmd_kind != "none" and lmd is not None:
        total = total + lmd * w.lambda_lmd
    return total


def _as_const(x) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return Tensor(data)
