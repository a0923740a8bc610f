import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cifpt import autodiff as ad
from cifpt.autodiff import Tensor
from cifpt.losses import (
    LossWeights,
    ce_loss,
    cif_total_loss,
    contrastive_from_similarity,
    ctc_loss,
    ctc_min_frames,
    lmd_contrastive,
    lmd_mse,
    lmd_smooth_l1,
    smooth_l1_elementwise,
)
from oracles import ce_scalar, ctc_enumerate, mse_scalar, softmax_rows


# -- CE -------------------------------------------------------------------
def test_ce_uniform_logits():
    assert ce_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_ce_saturated_correct_logits():
    logits = np.zeros((2, 4))
    logits[[0, 1], [1, 2]] = 30.0
    assert ce_loss(Tensor(logits), [1, 2]).item() < 1e-12


def test_ce_matches_scalar_oracle():
    logits = np.random.default_rng(0).normal(size=(3, 5))
    targets = [4, 0, 2]
    assert ce_loss(Tensor(logits), targets).item() == pytest.approx(ce_scalar(logits.tolist(), targets), abs=1e-12)


def test_ce_rejects_length_mismatch():
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((3, 4))), [0, 1])


def test_padded_batch_equals_mean_of_utterances():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 4, 5))
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    batched = ce_loss(Tensor(logits), targets, mask).item()
    per_utt = [ce_scalar(logits[0].tolist(), targets[0].tolist()),
               ce_scalar(logits[1, :2].tolist(), targets[1, :2].tolist())]
    assert batched == pytest.approx(np.mean(per_utt), abs=1e-9)


def test_masked_positions_get_zero_gradient():
    rng = np.random.default_rng(2)
    logits = ad.tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
    ad.backward(ce_loss(logits, rng.integers(0, 4, size=(2, 3)), mask))
    assert (logits.grad[1, 1:] == 0).all()


# -- CTC ------------------------------------------------------------------
def test_ctc_two_frame_example():
    logits = Tensor(np.zeros((2, 2)))
    assert ctc_loss(logits, [0]).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_single_forced_path():
    logits = Tensor(np.array([[0.0, -1e4]]))
    assert ctc_loss(logits, [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_ctc_rejects_inadmissible_target():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((2, 3))), [0, 0])
    assert ctc_min_frames([0, 0, 1]) == 4


def _ctc_cases():
    rng = np.random.default_rng(11)
    for t in range(1, 7):
        for v in range(1, 5):
            for length in range(1, 4):
                for target in itertools.product(range(v), repeat=length):
                    if ctc_min_frames(target) <= t:
                        yield rng.normal(size=(t, v + 1)), list(target)


def test_ctc_dp_matches_enumeration_on_sample():
    # The exhaustive sweep is the acceptance check; this is a fast spot check.
    cases = list(_ctc_cases())[::97]
    for logits, target in cases:
        dp = ctc_loss(Tensor(logits), target).item()
        ref = ctc_enumerate(softmax_rows(logits.tolist()), target, blank=logits.shape[1] - 1)
        assert dp == pytest.approx(ref, abs=1e-8)


def test_ctc_batched_with_padding_equals_per_utterance():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 5, 4))
    targets = np.array([[0, 1, 2], [2, 2, 0]])
    batched = ctc_loss(Tensor(logits), targets, np.array([5, 4]), np.array([3, 2])).item()
    a = ctc_loss(Tensor(logits[0]), [0, 1, 2]).item()
    b = ctc_loss(Tensor(logits[1, :4]), [2, 2]).item()
    assert batched == pytest.approx((a + b) / 2, abs=1e-12)


def test_ctc_grad_check():
    rng = np.random.default_rng(4)
    x = ad.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    assert ad.grad_check(lambda: ctc_loss(x, [0, 2, 2]), {"x": x}).max_error < 1e-4


# -- LMD ------------------------------------------------------------------
def test_mse_examples():
    assert lmd_mse(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]])).item() == 5.0
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert lmd_mse(Tensor(x), Tensor(x)).item() == 0.0


def test_mse_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    t, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert lmd_mse(Tensor(t), Tensor(s)).item() == pytest.approx(mse_scalar(t.tolist(), s.tolist()), abs=1e-12)


def test_smooth_l1_branches_and_continuity():
    def value(d, gamma=1.0):
        return smooth_l1_elementwise(Tensor(np.array([d])), gamma).data[0]
    assert value(0.5) == 0.125
    assert value(2.0) == 1.5
    assert value(1.0) == 0.5
    assert value(3.0, 3.0) == 1.5
    eps = 1e-7
    left = (value(1.0) - value(1.0 - eps)) / eps
    right = (value(1.0 + eps) - value(1.0)) / eps
    assert abs(left - right) < 1e-6


def test_smooth_l1_loss_mean_over_elements():
    loss = lmd_smooth_l1(Tensor([[0.5, 2.0]]), Tensor([[0.0, 0.0]]), 1.0).item()
    assert loss == pytest.approx((0.125 + 1.5) / 2)
    with pytest.raises(ValueError):
        lmd_smooth_l1(Tensor([[0.0]]), Tensor([[0.0]]), 0.0)


def test_contrastive_two_candidates():
    sim = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert contrastive_from_similarity(sim, 1.0).item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)


def test_contrastive_single_candidate_is_zero():
    assert contrastive_from_similarity(Tensor(np.array([[0.3]])), 0.01).item() == pytest.approx(0.0, abs=1e-15)


def test_contrastive_shift_invariance():
    sim = np.random.default_rng(6).normal(size=(4, 4))
    a = contrastive_from_similarity(Tensor(sim), 0.5).item()
    b = contrastive_from_similarity(Tensor(sim + 7.0), 0.5).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_contrastive_uses_cosine_and_handles_zero_vectors():
    teacher = np.array([[1.0, 0.0], [0.0, 2.0]])
    student = np.array([[3.0, 0.0], [0.0, 0.5]])
    loss = lmd_contrastive(Tensor(teacher), Tensor(student), tau=1.0).item()
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert math.isfinite(lmd_contrastive(Tensor(teacher), Tensor(np.zeros((2, 2))), tau=0.1).item())


def test_contrastive_ignores_masked_candidates():
    rng = np.random.default_rng(7)
    t, s = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
    mask = np.array([[1, 1, 0]], dtype=bool)
    masked = lmd_contrastive(Tensor(t), Tensor(s), 0.1, mask).item()
    trimmed = lmd_contrastive(Tensor(t[:, :2]), Tensor(s[:, :2]), 0.1).item()
    assert masked == pytest.approx(trimmed, abs=1e-12)


def test_teacher_receives_no_gradient():
    rng = np.random.default_rng(8)
    teacher = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    student = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ad.backward(lmd_mse(teacher, student) + lmd_contrastive(teacher, student) + lmd_smooth_l1(teacher, student))
    assert teacher.grad is None and student.grad is not None


@pytest.mark.parametrize("loss", [
    lambda t, s: lmd_mse(t, s),
    lambda t, s: lmd_smooth_l1(t, s, 0.7),
    lambda t, s: lmd_contrastive(t, s, 0.5),
])
def test_lmd_grad_check(loss):
    rng = np.random.default_rng(9)
    t = Tensor(rng.normal(size=(2, 3, 4)))
    s = ad.tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    assert ad.grad_check(lambda: loss(t, s), {"s": s}).max_error < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_are_non_negative(seed):
    rng = np.random.default_rng(seed)
    t, s = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 3, 4)))
    assert lmd_mse(t, s).item() >= 0
    assert lmd_smooth_l1(t, s).item() >= 0
    assert lmd_contrastive(t, s, 0.01).item() >= 0
    assert ce_loss(Tensor(rng.normal(size=(3, 5))), rng.integers(0, 5, 3)).item() >= 0
    assert ctc_loss(Tensor(rng.normal(size=(4, 3))), [0, 1]).item() >= 0


# -- totals ---------------------------------------------------------------
def test_total_loss_examples():
    w = LossWeights(lambda1=0.5, lambda2=1.0, lambda_lmd=0.0)
    assert cif_total_loss(1.0, 2.0, 3.0, 0.0, w) == 5.0
    assert cif_total_loss(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.lists(st.floats(0, 2), min_size=3, max_size=3))
def test_total_loss_matches_scalar_recomputation(parts, weights):
    ce, ctc, qua, lmd = parts
    w = LossWeights(lambda1=weights[0], lambda2=weights[1], lambda_lmd=weights[2], lmd_kind="mse")
    assert cif_total_loss(ce, ctc, qua, lmd, w) == pytest.approx(ce + weights[0] * ctc + weights[1] * qua
                                                                 + weights[2] * lmd, abs=1e-12)
    none = LossWeights(lambda1=weights[0], lambda2=weights[1], lambda_lmd=weights[2], lmd_kind="none")
    assert cif_total_loss(ce, ctc, qua, lmd, none) == pytest.approx(ce + weights[0] * ctc + weights[1] * qua)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)
    with pytest.raises(ValueError):
        LossWeights(tau=0)
    with pytest.raises(ValueError):
        LossWeights(lmd_kind="kl")
