"""Finite-difference gradient suite over every loss and network path."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cif import (
    CifConfig,
    WeightEstimator,
    integrate_fire,
    next_replay_pass,
    quantity_loss,
    scale_weights,
    schedule_replay,
)
from .data import Utterance, make_batch
from .losses import (
    LossWeights,
    ce_loss,
    ctc_loss,
    lmd_contrastive,
    lmd_mse,
    lmd_smooth_l1,
)
from .models import CifSluModel, ModelConfig, TeacherEncoder

TOLERANCE = 1e-4
STEP = 1e-5


def tiny_model_config(seed: int, **overrides) -> ModelConfig:
    base = dict(frame_dim=3, hidden_dim=8, vocab_size=5, intent_count=3, slot_type_count=2,
                encoder_layers=1, asr_decoder_layers=1, intent_decoder_layers=1, slot_decoder_layers=1,
                teacher_layers=1, heads=2, ffn_dim=12, downsample_factor=2, max_len=8, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(cfg: ModelConfig, rng: np.random.Generator):
    """Two utterances of different lengths, so padding paths are exercised."""
    utts = []
    for i, (frames, tokens, slots) in enumerate([(8, [0, 2, 1], [(1, 1, 2)]), (6, [3, 4], [(0, 0, 2)])]):
        x = rng.normal(size=(frames, cfg.frame_dim)).astype(np.float64)
        utts.append(Utterance(f"g{i}", x, tokens, int(rng.integers(cfg.intent_count)), slots))
    return make_batch(utts, cfg.slot_vocab)


def _projection_loss(out: Tensor, proj: np.ndarray, mask=None) -> Tensor:
    w = proj if mask is None else proj * mask.reshape(mask.shape + (1,) * (proj.ndim - mask.ndim))
    return (out * w).sum()


def _replayed(f: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Run ``f`` with the CIF firing schedule of its first call frozen."""
    calls = [0]

    def g():
        if calls[0]:
            next_replay_pass()
        calls[0] += 1
        return f()
    return g


@dataclass
class CaseResult:
    name: str
    seed: int
    max_error: float
    coordinates: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _run(name, seed, f, inputs) -> CaseResult:
    t0 = time.perf_counter()
    with schedule_replay():
        report = ad.grad_check(_replayed(f), inputs, step=STEP)
    return CaseResult(name, seed, report.max_error, sum(t.size for t in inputs.values()),
                      time.perf_counter() - t0)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return ad.tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _params(module, prefix="") -> dict[str, Tensor]:
    return {prefix + n: p for n, p in module.named_parameters()}


# -- loss cases -----------------------------------------------------------
def case_ce(seed):
    rng = np.random.default_rng([seed, 1])
    logits = _leaf(rng, 2, 4, 6)
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    return _run("loss/ce", seed, lambda: ce_loss(logits, targets, mask), {"logits": logits})


def case_ctc(seed):
    rng = np.random.default_rng([seed, 2])
    logits = _leaf(rng, 2, 6, 4)
    targets = np.array([[0, 1, 1], [2, 0, 0]])
    return _run("loss/ctc", seed, lambda: ctc_loss(logits, targets, np.array([6, 4]), np.array([3, 1])),
                {"logits": logits})


def case_qua(seed):
    rng = np.random.default_rng([seed, 3])
    z = _leaf(rng, 2, 7)
    counts = np.array([2, 5])
    return _run("loss/qua", seed, lambda: quantity_loss(ad.sigmoid(z), counts), {"z": z})


def _lmd_inputs(seed, salt):
    rng = np.random.default_rng([seed, salt])
    student = _leaf(rng, 2, 3, 5)
    teacher = Tensor(rng.normal(size=(2, 3, 5)))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    return student, teacher, mask


def case_lmd_mse(seed):
    c, h, mask = _lmd_inputs(seed, 4)
    return _run("loss/lmd_mse", seed, lambda: lmd_mse(h, c, mask), {"student": c})


def case_lmd_smooth_l1(seed):
    c, h, mask = _lmd_inputs(seed, 5)
    return _run("loss/lmd_smooth_l1", seed, lambda: lmd_smooth_l1(h, c, 1.0, mask), {"student": c})


def case_lmd_contrastive(seed):
    c, h, mask = _lmd_inputs(seed, 6)
    return _run("loss/lmd_contrastive", seed, lambda: lmd_contrastive(h, c, 0.01, mask), {"student": c})


def _model_and_batch(seed, **overrides):
    cfg = tiny_model_config(seed, **overrides)
    model = CifSluModel(cfg, np.random.default_rng([seed, 7]))
    batch = tiny_batch(cfg, np.random.default_rng([seed, 8]))
    return cfg, model, batch


def case_cif_pt_loss(seed):
    """CE + lambda1*CTC + lambda2*QUA through the whole pre-training stack."""
    _, model, batch = _model_and_batch(seed)
    weights = LossWeights(lmd_kind="none")
    return _run("loss/cif_asr_total", seed, lambda: model.pretrain_loss(batch, weights)["total"],
                model.pretrained_parameters())


def case_cif_pt_lmd_loss(seed):
    """The pre-training loss plus contrastive distillation against a frozen teacher."""
    cfg, model, batch = _model_and_batch(seed)
    teacher = TeacherEncoder(cfg, np.random.default_rng([seed, 9]))
    weights = LossWeights(lambda_lmd=0.1, tau=0.01, lmd_kind="contrastive")
    return _run("loss/cif_pt_total", seed, lambda: model.pretrain_loss(batch, weights, teacher)["total"],
                model.pretrained_parameters())


# -- forward paths --------------------------------------------------------
def case_encoder(seed):
    _, model, batch = _model_and_batch(seed)
    frames = ad.tensor(batch.frames, requires_grad=True)
    proj = np.random.default_rng([seed, 10]).normal(size=(batch.size, 4, model.cfg.hidden_dim))

    def f():
        h, mask = model.encoder(frames, batch.frame_lengths)
        return _projection_loss(h, proj, mask)
    return _run("path/encoder", seed, f, {"frames": frames, **_params(model.encoder, "encoder.")})


def case_cif(seed):
    """Weight estimation, scaling and integrate-and-fire, in both training and inference mode."""
    rng = np.random.default_rng([seed, 11])
    h = _leaf(rng, 2, 5, 4)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    proj = rng.normal(size=(2, 3, 4))
    proj_free = rng.normal(size=(2, 10, 4))
    cfg = CifConfig(hidden_dim=4)
    est = WeightEstimator(4, np.random.default_rng([seed, 12]))

    def f():
        alpha = est(h, mask)
        scaled = integrate_fire(h, scale_weights(alpha, np.array([3, 2]), mask), cfg, mask, max_tokens=3)
        free = integrate_fire(h, alpha * 2.0, cfg, mask, min_tokens=1)
        k = free.tokens.shape[1]
        return (_projection_loss(scaled.tokens, proj, scaled.token_mask)
                + _projection_loss(free.tokens, proj_free[:, :k], free.token_mask))
    return _run("path/cif", seed, f, {"h": h, **_params(est, "estimator.")})


def case_asr_decoder(seed):
    _, model, batch = _model_and_batch(seed)
    rng = np.random.default_rng([seed, 13])
    c = _leaf(rng, batch.size, batch.tokens.shape[1], model.cfg.hidden_dim)
    proj = rng.normal(size=(batch.size, batch.tokens.shape[1], model.cfg.vocab_size))

    def f():
        logits, _ = model.asr(c, model.asr.shift(batch.tokens), batch.token_mask)
        return _projection_loss(logits, proj, batch.token_mask)
    return _run("path/asr_decoder", seed, f, {"c": c, **_params(model.asr, "asr.")})


def _interface_leaf(seed, salt, model, batch):
    rng = np.random.default_rng([seed, salt])
    return _leaf(rng, batch.size, batch.tokens.shape[1], model.cfg.hidden_dim), rng


def case_intent(seed):
    _, model, batch = _model_and_batch(seed)
    x, rng = _interface_leaf(seed, 14, model, batch)
    proj = rng.normal(size=(batch.size, model.cfg.intent_count))
    return _run("path/intent_decoder", seed, lambda: _projection_loss(model.intent(x, batch.token_mask), proj),
                {"x": x, **_params(model.intent, "intent.")})


def case_slot_generation(seed):
    _, model, batch = _model_and_batch(seed)
    x, rng = _interface_leaf(seed, 15, model, batch)
    proj = rng.normal(size=batch.slot_targets.shape + (model.cfg.slot_vocab.size,))

    def f():
        logits = model.slot_gen(x, batch.token_mask, batch.slot_inputs, batch.slot_mask)
        return _projection_loss(logits, proj, batch.slot_mask)
    return _run("path/slot_generation", seed, f, {"x": x, **_params(model.slot_gen, "slot_gen.")})


def case_slot_tagging(seed):
    _, model, batch = _model_and_batch(seed)
    x, rng = _interface_leaf(seed, 16, model, batch)
    proj = rng.normal(size=batch.tags.shape + (model.cfg.slot_type_count + 1,))
    return _run("path/slot_tagging", seed,
                lambda: _projection_loss(model.slot_tag(x, batch.token_mask), proj, batch.token_mask),
                {"x": x, **_params(model.slot_tag, "slot_tag.")})


def case_slu_joint(seed):
    """Joint ASR + SLU objective with the c+m interface.

    Encoder weights sit several layers below this loss and some of their
    gradients are small enough (~1e-7) that float64 round-off in the loss
    dominates the central difference. The encoder is covered by
    ``path/encoder`` and ``loss/cif_asr_total``.
    """
    _, model, batch = _model_and_batch(seed, interface="c+m")
    params = {n: p for n, p in model.named_parameters() if not n.startswith(("slot_tag.", "encoder."))}
    return _run("loss/slu_joint", seed,
                lambda: model.slu_loss(batch, ("ic", "sf"), True, True, LossWeights(lmd_kind="none"))["total"],
                params)


CASES: dict[str, Callable[[int], CaseResult]] = {
    "loss/ce": case_ce,
    "loss/ctc": case_ctc,
    "loss/qua": case_qua,
    "loss/lmd_mse": case_lmd_mse,
    "loss/lmd_smooth_l1": case_lmd_smooth_l1,
    "loss/lmd_contrastive": case_lmd_contrastive,
    "loss/cif_asr_total": case_cif_pt_loss,
    "loss/cif_pt_total": case_cif_pt_lmd_loss,
    "loss/slu_joint": case_slu_joint,
    "path/encoder": case_encoder,
    "path/cif": case_cif,
    "path/asr_decoder": case_asr_decoder,
    "path/intent_decoder": case_intent,
    "path/slot_generation": case_slot_generation,
    "path/slot_tagging": case_slot_tagging,
}


def run_suite(seeds=range(5), cases=None, progress: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    results = []
    for name in (CASES if cases is None else cases):
        for seed in seeds:
            r = CASES[name](seed)
            results.append(r)
            if progress is not None:
                progress(r)
    return results
