"""End-to-end runs shared by the command line and the experiment tests."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, average_checkpoints
from .config import RunConfig
from .data import Utterance, gen_corpus, read_jsonl
from .evaluation import evaluate_model
from .models import PRETRAINED_PREFIXES, CifSluModel, TeacherEncoder
from .train import TrainResult, load_into, train_cifpt, train_slu, train_teacher_mlm


@dataclass
class Splits:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]


def make_splits(cfg: RunConfig, data_dir=None) -> Splits:
    """Read JSONL splits from ``data_dir`` or generate them from the corpus spec."""
    if data_dir is not None:
        d = Path(data_dir)
        return Splits(read_jsonl(d / "train.jsonl"), read_jsonl(d / "dev.jsonl"), read_jsonl(d / "test.jsonl"))
    return Splits(gen_corpus(cfg.corpus, "train"),
                  gen_corpus(cfg.corpus, "dev", cfg.eval.dev_count),
                  gen_corpus(cfg.corpus, "test", cfg.eval.test_count))


def build_teacher(cfg: RunConfig, corpus) -> TeacherEncoder:
    teacher = TeacherEncoder(cfg.model, np.random.default_rng([cfg.model.seed, 23]))
    if cfg.teacher.mlm_steps > 0:
        train_teacher_mlm(teacher, [u.tokens for u in corpus], cfg.teacher.mlm_steps, cfg.teacher.batch_size,
                          cfg.teacher.lr, cfg.teacher.mask_prob, cfg.model.seed)
    return teacher


def new_model(cfg: RunConfig) -> CifSluModel:
    return CifSluModel(cfg.model, np.random.default_rng([cfg.model.seed, 29]))


def pretrain(cfg: RunConfig, corpus, out_dir=None) -> tuple[CifSluModel, TrainResult]:
    model = new_model(cfg)
    needs_teacher = cfg.pretrain.objective == "cif" and cfg.pretrain.loss.lmd_kind != "none"
    teacher = build_teacher(cfg, corpus) if needs_teacher else None
    result = train_cifpt(model, corpus, cfg.pretrain, teacher, out_dir, cfg.to_dict())
    return model, result


def finetune(cfg: RunConfig, corpus, init: Checkpoint | None = None, out_dir=None
             ) -> tuple[CifSluModel, TrainResult]:
    """SLU training, optionally starting from pre-trained encoder/CIF/ASR tensors."""
    model = new_model(cfg)
    if init is not None:
        load_into(model, init, PRETRAINED_PREFIXES)
    result = train_slu(model, corpus, cfg.finetune, out_dir, cfg.to_dict())
    return model, result


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> CifSluModel:
    from .config import from_dict

    cfg = from_dict(ckpt.config) if cfg is None else cfg
    model = new_model(cfg)
    model.load_state_dict(ckpt.tensors)
    return model


def averaged_model(model: CifSluModel, result: TrainResult, k: int) -> CifSluModel:
    out = copy.deepcopy(model)
    out.load_state_dict(average_checkpoints(result.checkpoints, k).tensors)
    return out


def evaluate(cfg: RunConfig, model: CifSluModel, utts, tasks=("ic", "sf")) -> dict:
    return evaluate_model(model, utts, cfg.beam, tasks, cfg.eval.max_frames, cfg.eval.workers, cfg.to_dict())


VARIANTS = ("cifpt", "cifpt_no_lmd", "ctcpt", "scratch", "scratch_base")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """Configuration of one comparison arm, derived from the main recipe in ``cfg``.

    cifpt: CIF pre-training (with distillation as configured), then frozen SLU.
    cifpt_no_lmd: the same without distillation.
    ctcpt: CTC-only pre-training of the encoder; SLU decoders read frame-level states.
    scratch: no pre-training; joint ASR + SLU from random initialisation for
        as many steps as pre-training and fine-tuning together.
    scratch_base: like scratch, but only for the fine-tuning step count.
    """
    from .config import from_dict

    out = from_dict(cfg.to_dict())
    if variant == "cifpt":
        pass
    elif variant == "cifpt_no_lmd":
        out.pretrain.loss = replace(out.pretrain.loss, lmd_kind="none")
    elif variant == "ctcpt":
        out.pretrain.objective = "ctc"
        out.model.interface = "h"
    elif variant == "scratch":
        out.finetune.freeze_policy = "unfrozen"
        out.finetune.total_steps = cfg.pretrain.total_steps + cfg.finetune.total_steps
    elif variant == "scratch_base":
        out.finetune.freeze_policy = "unfrozen"
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return out.validate()


def run_variant(cfg: RunConfig, variant: str, splits: Splits, average: int = 10) -> dict:
    """Train one arm end to end and score its averaged SLU checkpoint on dev."""
    vcfg = variant_config(cfg, variant)
    t0 = time.perf_counter()
    init = None
    if not variant.startswith("scratch"):
        _, pre = pretrain(vcfg, splits.train)
        init = pre.final
    model, result = finetune(vcfg, splits.train, init)
    model = averaged_model(model, result, average)
    report = evaluate(vcfg, model, splits.dev)
    report["variant"] = variant
    report["seconds"] = time.perf_counter() - t0
    return report
