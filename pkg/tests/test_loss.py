"""Chamfer distances and supervised losses against brute-force oracles."""
import numpy as np
import pytest

from pointar.gradcheck import finite_difference_grad, max_relative_error
from pointar.loss import (
    LossReport,
    chamfer,
    cross_entropy,
    finetune_loss,
    generation_loss,
)
from pointar.nncore.tensor import Tensor, as_tensor, backward


def chamfer_oracle(a: np.ndarray, b: np.ndarray, form: int) -> float:
    """Independent double loop straight from the formula."""

    def dist(p, q):
        if form == 1:
            return float(np.abs(p - q).sum())
        return float(((p - q) ** 2).sum())

    first = sum(min(dist(p, q) for q in b) for p in a) / len(a)
    second = sum(min(dist(p, q) for p in a) for q in b) / len(b)
    return first + second


# -- chamfer -------------------------------------------------------------------


def test_chamfer_identical_sets_zero(rng):
    a = rng.normal(size=(7, 3))
    for form in (1, 2):
        assert float(chamfer(a, a.copy(), form).data) == 0.0


def test_chamfer_hand_examples():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    assert float(chamfer(a, b, 1).data) == pytest.approx(2.0)
    assert float(chamfer(a, b, 2).data) == pytest.approx(2.0)
    a2 = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    b2 = np.array([[0.0, 0, 0]])
    assert float(chamfer(a2, b2, 2).data) == pytest.approx(2.0)


def test_chamfer_l1_uses_manhattan_distance():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 1.0, 0.0]])
    # manhattan 2 each way; euclidean would give 2*sqrt(2)
    assert float(chamfer(a, b, 1).data) == pytest.approx(4.0)


def test_chamfer_matches_double_loop_oracle(rng):
    for _ in range(50):
        ka, kb = rng.integers(1, 12, size=2)
        a = rng.normal(size=(int(ka), 3))
        b = rng.normal(size=(int(kb), 3))
        for form in (1, 2):
            mine = float(chamfer(a, b, form).data)
            assert mine == pytest.approx(chamfer_oracle(a, b, form), abs=1e-12)


def test_chamfer_symmetry_exact(rng):
    for _ in range(20):
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=(9, 3))
        for form in (1, 2):
            assert float(chamfer(a, b, form).data) == float(chamfer(b, a, form).data)


def test_chamfer_translation_invariance(rng):
    a = rng.normal(size=(8, 3))
    b = rng.normal(size=(5, 3))
    shift = np.array([3.75, -1.25, 0.5])
    for form in (1, 2):
        base = float(chamfer(a, b, form).data)
        moved = float(chamfer(a + shift, b + shift, form).data)
        assert abs(base - moved) <= 1e-10


def test_chamfer_nonnegative_zero_iff_coincident(rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(4, 3))
    for form in (1, 2):
        assert float(chamfer(a, b, form).data) > 0.0
    stacked = np.concatenate([a, a[:2]])  # duplicates still coincide
    assert float(chamfer(stacked, a, 2).data) == 0.0


def test_chamfer_rejects_empty_and_bad_form(rng):
    pts = rng.normal(size=(3, 3))
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), pts, 1)
    with pytest.raises(ValueError):
        chamfer(pts, pts, 3)


def test_chamfer_gradients_match_finite_differences(rng):
    # keep witnesses well separated so the loss is locally smooth
    a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)) + 2.0, requires_grad=True)
    for form in (1, 2):
        a.grad = b.grad = None
        loss = chamfer(a, b, form)
        backward(loss)
        for t in (a, b):
            numeric = finite_difference_grad(
                lambda: float(chamfer(a, b, form).data), t.data
            )
            assert max_relative_error(t.grad, numeric) <= 1e-4


# -- generation loss ------------------------------------------------------------


def test_generation_loss_perfect_prediction_zero(rng):
    patches = rng.normal(size=(5, 6, 3))
    total, cd1, cd2 = generation_loss(patches.copy(), patches)
    assert float(total.data) == 0.0


def test_generation_loss_single_pair_equals_chamfer_sum(rng):
    pred = rng.normal(size=(1, 7, 3))
    tgt = rng.normal(size=(1, 7, 3))
    total, cd1, cd2 = generation_loss(pred, tgt)
    expected = float(chamfer(pred[0], tgt[0], 1).data) + float(chamfer(pred[0], tgt[0], 2).data)
    assert float(total.data) == pytest.approx(expected, abs=1e-14)


def test_generation_loss_matches_per_pair_oracle(rng):
    pred = rng.normal(size=(3, 5, 3))
    tgt = rng.normal(size=(3, 5, 3))
    total, cd1, cd2 = generation_loss(pred, tgt)
    oracle1 = np.mean([chamfer_oracle(pred[i], tgt[i], 1) for i in range(3)])
    oracle2 = np.mean([chamfer_oracle(pred[i], tgt[i], 2) for i in range(3)])
    assert float(cd1.data) == pytest.approx(oracle1, abs=1e-12)
    assert float(cd2.data) == pytest.approx(oracle2, abs=1e-12)
    assert float(total.data) == pytest.approx(oracle1 + oracle2, abs=1e-12)


def test_generation_loss_batched_leading_dims(rng):
    pred = rng.normal(size=(2, 3, 4, 3))
    tgt = rng.normal(size=(2, 3, 4, 3))
    total, _, _ = generation_loss(pred, tgt)
    per_cloud = np.mean(
        [float(generation_loss(pred[i], tgt[i])[0].data) for i in range(2)]
    )
    assert float(total.data) == pytest.approx(per_cloud, abs=1e-12)


def test_generation_loss_shape_mismatch(rng):
    with pytest.raises(ValueError):
        generation_loss(rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 5, 3)))


# -- finetune loss -----------------------------------------------------------------


def test_finetune_loss_combination():
    ld = as_tensor(np.asarray(1.25))
    lg = as_tensor(np.asarray(0.5))
    assert float(finetune_loss(ld, lg, 0.0).data) == 1.25
    assert float(finetune_loss(ld, lg, 3.0).data) == pytest.approx(2.75)
    assert float(finetune_loss(ld, as_tensor(np.asarray(0.0)), 3.0).data) == 1.25
    with pytest.raises(ValueError):
        finetune_loss(ld, lg, -1.0)


def test_loss_report_invariants():
    pre = LossReport.for_pretrain(0.3, 0.2)
    assert pre.total == pytest.approx(0.5)
    assert pre.generation == pytest.approx(0.5)
    fine = LossReport.for_finetune(1.0, 0.3, 0.2, 3.0)
    assert fine.total == pytest.approx(1.0 + 3.0 * 0.5)
    assert fine.downstream == 1.0


# -- cross entropy -----------------------------------------------------------------


def test_cross_entropy_uniform_logits(rng):
    for c in (2, 5, 9):
        loss = cross_entropy(np.zeros(c), 0)
        assert float(loss.data) == pytest.approx(np.log(c), abs=1e-12)


def test_cross_entropy_dominant_logit_approaches_zero():
    logits = np.zeros(4)
    logits[2] = 50.0
    assert float(cross_entropy(logits, 2).data) < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=6)
    loss = cross_entropy(logits, labels)
    backward(loss)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    onehot = np.eye(5)[labels]
    assert np.abs(logits.grad - (p - onehot) / 6.0).max() <= 1e-10


def test_cross_entropy_rejects_bad_labels(rng):
    with pytest.raises(ValueError):
        cross_entropy(rng.normal(size=(2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(rng.normal(size=3), -1)
