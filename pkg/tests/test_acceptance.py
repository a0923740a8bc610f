"""One test per acceptance criterion; the terminal summary prints a line for each."""
import time

import numpy as np
import pytest

import experiments
from cifpt import cli, verify
from cifpt.autodiff import Tensor
from cifpt.checkpoint import Checkpoint, average_checkpoints, load_checkpoint
from cifpt.cif import CifConfig, integrate_fire, scale_weights
from cifpt.evaluation import BeamConfig, EntityPrediction, beam_search, greedy_decode, slu_f1
from cifpt.losses import ctc_loss, ctc_min_frames
from cifpt.models import CifSluModel
from cifpt.train import lr_cifpt, lr_noam
from oracles import cif_scalar_loop, ctc_enumerate, softmax_rows
from test_evaluation import TableDecoder, _log_softmax, _random_two_step

CRITERION_5_BUDGET = 30 * 60


@pytest.mark.criterion("1")
def test_cif_firing_exactness(record_property):
    t0 = time.perf_counter()
    worst_sum = worst_combo = 0.0
    for seed in range(1000):
        rng = np.random.default_rng([5, seed])
        t = int(rng.integers(2, 65))
        n, d = int(rng.integers(1, t + 1)), int(rng.integers(1, 9))
        h = rng.normal(size=(t, d))
        alpha = scale_weights(Tensor(rng.uniform(0.01, 1.0, size=t)), n)
        out = integrate_fire(Tensor(h), alpha, CifConfig(hidden_dim=d))
        assert out.counts[0] == n, f"case {seed}: fired {out.counts[0]} tokens, expected {n}"
        w = out.weight_matrix.data[:n]
        rows = w.sum(axis=1)
        if out.fired_via_tail[0]:
            rows = rows[:-1]
        worst_sum = max(worst_sum, float(np.abs(rows - 1.0).max(initial=0.0)))
        worst_combo = max(worst_combo, float(np.abs(w @ h - out.tokens.data[:n]).max()))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"row-sum err {worst_sum:.1e}, |c-Wh| {worst_combo:.1e}, {elapsed:.1f}s")
    assert worst_sum <= 1e-9 and worst_combo <= 1e-9 and elapsed < 10


DRAWS_PER_CONFIGURATION = 8


def _ctc_configurations():
    rng = np.random.default_rng(2024)
    for t in range(1, 7):
        for labels in range(1, 5):
            for length in range(1, 4):
                for target in np.ndindex(*(labels,) * length):
                    if ctc_min_frames(target) <= t:
                        for _ in range(DRAWS_PER_CONFIGURATION):
                            yield rng.normal(size=(t, labels + 1)), list(target)


@pytest.mark.criterion("2")
def test_ctc_matches_path_enumeration(record_property):
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for logits, target in _ctc_configurations():
        dp = ctc_loss(Tensor(logits), target).item()
        ref = ctc_enumerate(softmax_rows(logits.tolist()), target, blank=logits.shape[1] - 1)
        worst = max(worst, abs(dp - ref))
        count += 1
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{count} instances, max |dp-enum| {worst:.1e}, {elapsed:.1f}s")
    assert count > 2000 and worst <= 1e-8 and elapsed < 60


REQUIRED_CASES = {
    "loss/ce", "loss/ctc", "loss/qua", "loss/lmd_mse", "loss/lmd_smooth_l1", "loss/lmd_contrastive",
    "loss/cif_asr_total", "loss/cif_pt_total", "path/encoder", "path/cif", "path/asr_decoder",
    "path/intent_decoder", "path/slot_generation", "path/slot_tagging",
}


@pytest.mark.criterion("3")
def test_gradient_suite(record_property):
    assert REQUIRED_CASES <= set(verify.CASES)
    t0 = time.perf_counter()
    results = verify.run_suite(range(5))
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    failed = [f"{r.name}@{r.seed}" for r in results if not r.passed]
    record_property("detail", f"{len(results)} checks, worst {worst.name}@{worst.seed} "
                              f"{worst.max_error:.1e}, {elapsed:.0f}s")
    assert not failed, failed
    assert verify.STEP == 1e-5 and verify.TOLERANCE == 1e-4
    assert elapsed < 300


@pytest.mark.criterion("4")
def test_hand_traced_cif_case(record_property):
    h, alpha = [[1.0], [2.0], [3.0]], [0.6, 0.6, 0.6]
    out = integrate_fire(Tensor(np.array(h)), Tensor(np.array(alpha)), CifConfig(hidden_dim=1))
    ref, _, _ = cif_scalar_loop(h, alpha)
    err = max(float(np.abs(out.tokens.data - np.array([[1.4], [2.2]])).max()),
              float(np.abs(out.tokens.data - np.array(ref)).max()))
    record_property("detail", f"c={out.tokens.data.ravel().round(12).tolist()}, err {err:.1e}")
    assert out.tokens.shape == (2, 1) and err <= 1e-12


# -- toy end-to-end ---------------------------------------------------------
CORE = ("cifpt", "scratch", "ctcpt")


@pytest.fixture(scope="session")
def core_runs():
    return experiments.run(CORE)


def _per_seed(runs, variant, name):
    return [experiments.metric(runs[(variant, s)], name) for s in experiments.SEEDS]


def _fmt(values):
    return "/".join(f"{v:.3f}" for v in values)


@pytest.mark.slow
@pytest.mark.criterion("5a")
def test_cifpt_frozen_slu_quality(core_runs, record_property):
    runs, _ = core_runs
    ic, sf = _per_seed(runs, "cifpt", "ic"), _per_seed(runs, "cifpt", "strict_f1")
    record_property("detail", f"IC mean {np.mean(ic):.3f} ({_fmt(ic)}), "
                              f"strict F1 mean {np.mean(sf):.3f} ({_fmt(sf)})")
    assert np.mean(ic) >= 0.95 and np.mean(sf) >= 0.80


@pytest.mark.slow
@pytest.mark.criterion("5b")
def test_cifpt_beats_scratch_joint(core_runs, record_property):
    runs, _ = core_runs
    m0, m3 = _per_seed(runs, "cifpt", "slu_f1"), _per_seed(runs, "scratch", "slu_f1")
    margin = float(np.mean(m0) - np.mean(m3))
    ic_margin = float(np.mean(_per_seed(runs, "cifpt", "ic")) - np.mean(_per_seed(runs, "scratch", "ic")))
    record_property("detail", f"SLU-F1 cifpt {_fmt(m0)} vs scratch {_fmt(m3)}, margin {margin:+.3f} "
                              f"(IC margin {ic_margin:+.3f})")
    assert margin > 0


@pytest.mark.slow
@pytest.mark.criterion("5c")
def test_cifpt_vs_ctc_pretraining_report(core_runs, record_property):
    runs, _ = core_runs
    m0, m4 = _per_seed(runs, "cifpt", "slu_f1"), _per_seed(runs, "ctcpt", "slu_f1")
    margin = float(np.mean(m0) - np.mean(m4))
    record_property("status", "REPORT held" if margin > 0 else "REPORT inverted")
    record_property("detail", f"SLU-F1 cifpt {_fmt(m0)} vs ctcpt {_fmt(m4)}, margin {margin:+.3f}")


@pytest.mark.slow
@pytest.mark.criterion("5-runtime")
def test_end_to_end_runtime(core_runs, record_property):
    runs, elapsed = core_runs
    per_run = {v: np.mean([runs[(v, s)]["seconds"] for s in experiments.SEEDS]) for v in CORE}
    record_property("detail", f"{elapsed / 60:.1f} min wall-clock for {len(runs)} runs "
                              f"({', '.join(f'{v} {t:.0f}s' for v, t in per_run.items())})")
    assert elapsed < CRITERION_5_BUDGET


@pytest.mark.slow
@pytest.mark.criterion("6")
def test_contrastive_distillation_report(core_runs, record_property):
    runs, _ = core_runs
    no_lmd, _ = experiments.run(("cifpt_no_lmd",))
    m0, m5 = _per_seed(runs, "cifpt", "slu_f1"), _per_seed(no_lmd, "cifpt_no_lmd", "slu_f1")
    margin = float(np.mean(m0) - np.mean(m5))
    record_property("status", "REPORT held" if margin >= 0 else "REPORT inverted")
    record_property("detail", f"SLU-F1 contrastive {_fmt(m0)} vs none {_fmt(m5)}, margin {margin:+.3f}")


# -- metrics, schedules, reproducibility ------------------------------------
@pytest.mark.criterion("7")
def test_metric_suite(record_property):
    gold = [[EntityPrediction(0, ("next", "friday"))]]
    worked = slu_f1([[EntityPrediction(0, ("friday",))]], gold)
    expected = 0.5 * 0.5 + 0.5 * (6 / 11)
    assert abs(worked - expected) <= 1e-6
    assert slu_f1(gold, gold) == 1.0 and slu_f1([[]], gold) == 0.0

    rng = np.random.default_rng(7)
    for _ in range(20):
        table = {(): rng.normal(size=5)}
        for a in range(5):
            table[(a,)] = rng.normal(size=5)
        dec = TableDecoder(table, eos_id=4, default=rng.normal(size=5))
        assert beam_search(dec, None, BeamConfig(width=1, max_len=4)) == greedy_decode(dec, None, 4, 1.25)

    agree = 0
    for seed in range(20):
        dec = _random_two_step(np.random.default_rng(seed), 4)
        scores = {(a, b): _log_softmax(dec.table[()] / 1.25)[a] + _log_softmax(dec.table[(a,)] / 1.25)[b]
                  for a in range(4) for b in range(4)}
        res = beam_search(dec, None, BeamConfig(width=4, max_len=2))
        agree += tuple(res.tokens) == max(scores, key=scores.get)
    record_property("detail", f"worked example {worked:.6f}, beam/exhaustive agreement {agree}/20")
    assert agree == 20


@pytest.mark.criterion("8")
def test_schedule_and_averaging_exactness(record_property):
    total = 4000
    hits = [lr_cifpt(0.04 * total, total), lr_cifpt(0.68 * total, total), lr_cifpt(total, total), lr_noam(1600)]
    assert hits == [1e-3, 1e-3, 1e-4, 5e-4]
    model = CifSluModel(verify.tiny_model_config(0), np.random.default_rng(1))
    ckpt = Checkpoint(model.state_dict(), 200, "fp")
    avg = average_checkpoints([ckpt] * 10)
    same = all(avg.tensors[k].tobytes() == ckpt.tensors[k].tobytes() for k in ckpt.tensors)
    record_property("detail", f"lr hits {hits}, 10-way average identical: {same}")
    assert same


@pytest.mark.criterion("9")
def test_pretraining_is_reproducible(tmp_path, record_property, capsys):
    overrides = ["pretrain.total_steps=12", "pretrain.checkpoint_every=4", "teacher.mlm_steps=10",
                 "corpus.count=60", "pretrain.dropout=0.1"]
    finals = []
    for run in ("a", "b"):
        argv = ["pretrain", "--config", str(experiments.RECIPE), "--seed", "4", "--out", str(tmp_path / run)]
        for o in overrides:
            argv += ["--set", o]
        assert cli.main(argv) == 0
        finals.append((tmp_path / run / "final.cifc").read_bytes())
    capsys.readouterr()
    ckpt = load_checkpoint(tmp_path / "a" / "final.cifc")
    record_property("detail", f"final checkpoints {len(finals[0])} bytes, identical: {finals[0] == finals[1]}")
    assert finals[0] == finals[1]
    assert ckpt.config["pretrain"]["total_steps"] == 12 and ckpt.config["corpus"]["seed"] == 4
