"""Optimisation for CIF pre-training and SLU fine-tuning."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, average_checkpoints, fingerprint, save_checkpoint
from .data import Batch, SlotVocab, Utterance, group_by_frames, make_batch
from .losses import LossWeights, ctc_min_frames
from .models import CifSluModel, ModelConfig, TeacherEncoder
from .nn import dropout_scope

log = logging.getLogger(__name__)

STAGES = ("cifpt", "slu", "slu_ic", "slu_sf")
SCHEDULES = ("cifpt_trapezoid", "noam")
FREEZE_POLICIES = ("frozen", "unfrozen_half", "unfrozen")
OBJECTIVES = ("cif", "ctc")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    stage: str = "cifpt"
    objective: str = "cif"
    total_steps: int = 4000
    schedule: str = "cifpt_trapezoid"
    peak_lr: float = 1e-3
    floor_lr: float = 1e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1e-5
    eps: float = 1e-8
    freeze_policy: str = "frozen"
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 200
    keep_checkpoints: int = 10
    max_frames: int = 3000
    clip_norm: float = 5.0
    dropout: float = 0.0
    augment_noise: float = 0.0    # std of extra Gaussian frame noise
    augment_speed: float = 0.0    # max relative tempo change
    log_every: int = 50

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {FREEZE_POLICIES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.augment_noise < 0 or not 0 <= self.augment_speed < 0.5:
            raise ValueError("augment_noise must be >= 0 and augment_speed in [0, 0.5)")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.schedule == "noam" and not 0 < self.warmup < self.total_steps:
            raise ValueError("noam warmup must lie in (0, total_steps)")


# -- schedules ------------------------------------------------------------
def lr_cifpt(step: float, total: float, peak: float = 1e-3, floor: float = 1e-4) -> float:
    """Linear warm-up over 4% of steps, flat until 68%, linear decay to ``floor``."""
    warm = 0.04 * total
    hold = 0.68 * total
    if step <= warm:
        return peak * step / warm
    if step <= hold:
        return peak
    return floor + (peak - floor) * (total - step) / (total - hold)


def lr_noam(step: float, warmup: float = 1600, peak: float = 5e-4) -> float:
    """``peak * min(step / warmup, sqrt(warmup / step))``."""
    if step < 1:
        raise ValueError("noam schedule starts at step 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "noam":
        return lr_noam(step, cfg.warmup, cfg.peak_lr)
    return lr_cifpt(step, cfg.total_steps, cfg.peak_lr, cfg.floor_lr)


# -- optimiser ------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay over a named parameter set."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=1e-5):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = {n: 0 for n in params}

    def step(self, lr: float, names: Sequence[str] | None = None) -> None:
        for name in self.params if names is None else names:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            # in place, with the same operation order as the textbook update
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            step = m / (1 - self.beta1 ** t)
            denom = v / (1 - self.beta2 ** t)
            np.sqrt(denom, out=denom)
            denom += self.eps
            step /= denom
            step += self.weight_decay * p.data
            step *= lr
            p.data -= step


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- batching -------------------------------------------------------------
def augment(utt: Utterance, noise: float, speed: float, rng: np.random.Generator, factor: int = 1) -> Utterance:
    """Tempo perturbation by nearest-frame resampling, then additive Gaussian noise.

    The tempo change never shrinks an utterance below ``factor`` frames per
    CTC-required label, so every augmented example stays trainable.
    """
    frames = utt.frames
    if speed > 0:
        rate = rng.uniform(1 - speed, 1 + speed)
        t = max(factor * ctc_min_frames(utt.tokens), int(round(frames.shape[0] / rate)))
        idx = np.minimum((np.arange(t) * frames.shape[0] / t).astype(np.int64), frames.shape[0] - 1)
        frames = frames[idx]
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return replace(utt, frames=frames)


def batch_stream(corpus: Sequence[Utterance], max_frames: int, vocab: SlotVocab,
                 rng: np.random.Generator, cfg: "TrainConfig | None" = None, factor: int = 1) -> Iterator[Batch]:
    """Endless shuffled epochs of frame-budgeted batches, augmented per ``cfg``.

    The frame budget applies to the utterances before tempo perturbation.
    """
    noise = cfg.augment_noise if cfg is not None else 0.0
    speed = cfg.augment_speed if cfg is not None else 0.0
    while True:
        order = rng.permutation(len(corpus))
        for group in group_by_frames([corpus[i] for i in order], max_frames):
            if noise or speed:
                group = [augment(u, noise, speed, rng, factor) for u in group]
            yield make_batch(group, vocab)


# -- bookkeeping ----------------------------------------------------------
@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    paths: list[Path]
    log: list[dict]

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def averaged(self, k: int = 10) -> Checkpoint:
        return average_checkpoints(self.checkpoints, k)


class _Recorder:
    def __init__(self, model, cfg: TrainConfig, model_cfg: ModelConfig, out_dir, run_config, prefix):
        self.model = model
        self.cfg = cfg
        self.fingerprint = fingerprint(asdict(model_cfg), asdict(cfg))
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.run_config = run_config or {"model": asdict(model_cfg), "train": asdict(cfg)}
        self.prefix = prefix
        self.result = TrainResult([], [], [])
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "metrics.jsonl", "w", encoding="utf-8")

    def log(self, record: dict) -> None:
        self.result.log.append(record)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_fh.flush()

    def checkpoint(self, step: int) -> None:
        ckpt = Checkpoint(self.model.state_dict(), step, self.fingerprint, self.run_config)
        self.result.checkpoints.append(ckpt)
        if self.out_dir is not None:
            path = save_checkpoint(self.out_dir / f"{self.prefix}_{step:06d}.cifc", ckpt)
            self.result.paths.append(path)
        keep = self.cfg.keep_checkpoints
        if len(self.result.checkpoints) > keep:
            self.result.checkpoints.pop(0)
            if self.result.paths:
                old = self.result.paths.pop(0)
                old.unlink(missing_ok=True)

    def close(self) -> TrainResult:
        if self._log_fh is not None:
            self._log_fh.close()
        return self.result


def _check_finite(out: dict, batch: Batch, step: int, out_dir) -> None:
    total = out["total"].data
    if np.isfinite(total).all():
        return
    dump = {
        "step": step,
        "batch_ids": batch.ids,
        "components": {k: float(v.data) for k, v in out.items()},
    }
    if out_dir is not None:
        Path(out_dir, "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
    raise NonFiniteLossError(f"non-finite loss at step {step} (batch {batch.ids[:3]}...)", dump)


def _components(out: dict) -> dict:
    return {k: float(v.data) for k, v in out.items()}


def _update(params: dict[str, Tensor], names: Sequence[str], opt: AdamW, cfg: TrainConfig, lr: float) -> float:
    norm = clip_grad_norm([params[n] for n in names], cfg.clip_norm)
    opt.step(lr, names)
    for p in params.values():
        p.grad = None
    return norm


# -- stages ---------------------------------------------------------------
def train_cifpt(model: CifSluModel, corpus: Sequence[Utterance], cfg: TrainConfig,
                teacher: TeacherEncoder | None = None, out_dir=None, run_config: dict | None = None) -> TrainResult:
    """CIF pre-training: CE + lambda1*CTC + lambda2*QUA (+ lambda*LMD), or CTC only."""
    cfg.validate()
    if cfg.objective == "cif" and cfg.loss.lmd_kind != "none" and teacher is None:
        raise ValueError("distillation requested but no teacher given")
    rng = np.random.default_rng([cfg.seed, 11])
    drop_rng = np.random.default_rng([cfg.seed, 12])
    rec = _Recorder(model, cfg, model.cfg, out_dir, run_config, "cifpt")
    params = model.pretrained_parameters()
    if cfg.objective == "ctc":
        params = {n: p for n, p in params.items() if n.startswith(("encoder.", "ctc_head."))}
    names = list(params)
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    stream = batch_stream(corpus, cfg.max_frames, model.cfg.slot_vocab, rng, cfg, model.cfg.downsample_factor)
    model.zero_grad()
    for step in range(1, cfg.total_steps + 1):
        batch = next(stream)
        lr = learning_rate(cfg, step)
        with dropout_scope(cfg.dropout, drop_rng):
            out = model.pretrain_loss(batch, cfg.loss, teacher, cfg.objective)
        _check_finite(out, batch, step, out_dir)
        ad.backward(out["total"])
        norm = _update(params, names, opt, cfg, lr)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            record = {"step": step, "lr": lr, "grad_norm": norm, **_components(out)}
            if cfg.objective == "cif":
                record["token_acc"] = float(_token_accuracy(model, batch))
            rec.log(record)
        if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
            rec.checkpoint(step)
    return rec.close()


def _token_accuracy(model: CifSluModel, batch: Batch) -> float:
    with ad.no_grad():
        state = model.run_cif(batch, scaled=True)
        logits, _ = model.asr(state.cif.tokens, model.asr.shift(batch.tokens), batch.token_mask)
    pred = logits.data.argmax(axis=-1)
    mask = batch.token_mask
    return float((pred == batch.tokens)[mask].mean())


def stage_tasks(stage: str) -> tuple[str, ...]:
    return {"slu": ("ic", "sf"), "slu_ic": ("ic",), "slu_sf": ("sf",)}[stage]


def pretrained_trainable(cfg: TrainConfig, step: int) -> bool:
    """Whether encoder/CIF/ASR parameters are updated at 1-based ``step``."""
    if cfg.freeze_policy == "frozen":
        return False
    if cfg.freeze_policy == "unfrozen_half":
        return step > cfg.total_steps / 2
    return True


def train_slu(model: CifSluModel, corpus: Sequence[Utterance], cfg: TrainConfig, out_dir=None,
              run_config: dict | None = None) -> TrainResult:
    """SLU fine-tuning under the configured freeze policy.

    While pre-trained parameters are trainable, the ASR loss is added to
    the SLU loss (joint ASR + SLU training).
    """
    cfg.validate()
    if cfg.stage == "cifpt":
        raise ValueError("train_slu needs an SLU stage")
    tasks = stage_tasks(cfg.stage)
    rng = np.random.default_rng([cfg.seed, 13])
    drop_rng = np.random.default_rng([cfg.seed, 14])
    rec = _Recorder(model, cfg, model.cfg, out_dir, run_config, "slu")
    params = dict(model.named_parameters())
    slu_names = list(model.slu_parameters())
    all_names = list(params)
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    stream = batch_stream(corpus, cfg.max_frames, model.cfg.slot_vocab, rng, cfg, model.cfg.downsample_factor)
    model.zero_grad()
    for step in range(1, cfg.total_steps + 1):
        batch = next(stream)
        lr = learning_rate(cfg, step)
        joint = pretrained_trainable(cfg, step)
        with dropout_scope(cfg.dropout, drop_rng):
            out = model.slu_loss(batch, tasks, train_pretrained=joint, joint_asr=joint, weights=cfg.loss)
        _check_finite(out, batch, step, out_dir)
        ad.backward(out["total"])
        norm = _update(params, all_names if joint else slu_names, opt, cfg, lr)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            rec.log({"step": step, "lr": lr, "grad_norm": norm, "joint": joint, **_components(out)})
        if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
            rec.checkpoint(step)
    return rec.close()


def train_teacher_mlm(teacher: TeacherEncoder, token_seqs: Sequence[Sequence[int]], steps: int = 300,
                      batch_size: int = 32, lr: float = 1e-3, mask_prob: float = 0.15,
                      seed: int = 0) -> list[dict]:
    """Masked-token pre-training of the teacher on transcripts."""
    rng = np.random.default_rng([seed, 17])
    params = dict(teacher.named_parameters())
    opt = AdamW(params, 0.9, 0.98, 1e-8, 1e-5)
    history = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(token_seqs), size=batch_size)
        tokens, mask = _pad([token_seqs[i] for i in idx])
        inputs, picked = mask_tokens(tokens, mask, teacher.mask_id, mask_prob, rng)
        logits = teacher.mlm_logits(inputs, mask)
        loss = _masked_ce(logits, tokens, picked)
        ad.backward(loss)
        clip_grad_norm(list(params.values()), 5.0)
        opt.step(lr * min(1.0, step / 50))
        for p in params.values():
            p.grad = None
        if step % 50 == 0 or step == steps:
            history.append({"step": step, "loss": float(loss.data)})
    return history


def mask_tokens(tokens: np.ndarray, mask: np.ndarray, mask_id: int, prob: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    picked = (rng.random(tokens.shape) < prob) & mask
    for i in range(tokens.shape[0]):
        if not picked[i].any():
            picked[i, rng.integers(0, mask[i].sum())] = True
    inputs = np.where(picked, mask_id, tokens)
    return inputs, picked


def mlm_accuracy(teacher: TeacherEncoder, token_seqs, seed: int = 1, prob: float = 0.15) -> float:
    rng = np.random.default_rng([seed, 19])
    tokens, mask = _pad(token_seqs)
    inputs, picked = mask_tokens(tokens, mask, teacher.mask_id, prob, rng)
    with ad.no_grad():
        pred = teacher.mlm_logits(inputs, mask).data.argmax(axis=-1)
    return float((pred == tokens)[picked].mean())


def _masked_ce(logits: Tensor, targets: np.ndarray, picked: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    nll = -(ad.log_softmax(logits) * onehot).sum(axis=-1)
    return (nll * picked.astype(np.float64)).sum() * (1.0 / picked.sum())


def _pad(seqs) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    tokens = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


def load_into(model, ckpt: Checkpoint, prefixes: Sequence[str] | None = None) -> list[str]:
    """Load tensors (optionally only those under ``prefixes``) into ``model``."""
    state = ckpt.tensors
    if prefixes is not None:
        state = {k: v for k, v in state.items() if k.startswith(tuple(prefixes))}
    return model.load_state_dict(state, strict=prefixes is None)
