"""Loss oracles: direct evaluation, extension-definition, and brute force."""

import math

import numpy as np
import pytest

from terravec.gradcheck import finite_difference_check
from terravec.losses import (
    LossWeights,
    chamfer,
    class_balance_weights,
    lovasz_hinge,
    total_loss,
    weighted_bce,
    weighted_bce_logits,
)
from terravec.tensor import ShapeError, Tensor


# --- weighted binary cross-entropy -----------------------------------------


def test_bce_perfect_prediction_is_tiny():
    y = np.array([1.0, 0.0, 1.0])
    p = Tensor(y.copy())
    assert weighted_bce(p, y).item() <= 1e-6


def test_bce_zero_positive_weight_ignores_positives():
    y = np.array([1.0, 1.0, 0.0])
    p = Tensor(np.array([0.01, 0.99, 0.5]))  # wildly different positives
    loss = weighted_bce(p, y, w_pos=0.0, w_neg=1.0)
    expected = -math.log(0.5) / 3.0
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_bce_matches_direct_evaluation():
    y = np.array([1.0, 0.0])
    p = Tensor(np.array([0.8, 0.3]))
    expected = -(math.log(0.8) + math.log(0.7)) / 2.0
    assert abs(weighted_bce(p, y, 1.0, 1.0).item() - expected) < 1e-12


def test_bce_logit_path_agrees_with_probability_path():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(20) * 3
    y = (rng.random(20) > 0.5).astype(float)
    from_probs = weighted_bce(Tensor(1 / (1 + np.exp(-s))), y, 1.4, 0.6).item()
    from_logits = weighted_bce_logits(Tensor(s), y, 1.4, 0.6).item()
    assert abs(from_probs - from_logits) < 1e-9


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        weighted_bce(Tensor(np.zeros(3)), np.zeros(4))


def test_bce_nonnegative_and_monotone():
    y = np.ones(1)
    losses = [weighted_bce(Tensor([p]), y).item() for p in (0.2, 0.5, 0.9)]
    assert all(v >= 0 for v in losses)
    assert losses[0] > losses[1] > losses[2]


def test_class_balance_weights():
    y = np.array([1, 0, 0, 0])
    w_pos, w_neg = class_balance_weights(y)
    assert w_pos + w_neg == pytest.approx(2.0, abs=1e-15)
    assert w_pos == pytest.approx(1.5) and w_neg == pytest.approx(0.5)
    assert class_balance_weights(np.zeros(4)) == (1.0, 1.0)


# --- Jaccard hinge surrogate ------------------------------------------------


def lovasz_oracle(scores: np.ndarray, y: np.ndarray) -> float:
    """Evaluate the extension definition on sorted cumulative sets."""
    a = np.maximum(0.0, 1.0 - scores * (2.0 * y - 1.0))
    order = np.argsort(-a, kind="stable")
    fg = set(np.flatnonzero(y == 1).tolist())

    def jaccard_loss(mispredicted: set) -> float:
        union = fg | mispredicted
        if not union:
            return 0.0
        return len(mispredicted) / len(union)

    loss, prev, current = 0.0, 0.0, set()
    for idx in order:
        current.add(int(idx))
        val = jaccard_loss(current)
        loss += a[idx] * (val - prev)
        prev = val
    return loss


def test_lovasz_perfect_margins_zero():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    s = Tensor(np.array([2.0, -2.0, 2.0, -2.0]))
    assert lovasz_hinge(s, y).item() == 0.0


def test_lovasz_all_foreground_confident_zero():
    y = np.ones(5)
    assert lovasz_hinge(Tensor(np.full(5, 2.0)), y).item() == 0.0


def test_lovasz_all_background_defined_zero():
    y = np.zeros(5)
    assert lovasz_hinge(Tensor(np.random.default_rng(0).standard_normal(5)), y).item() == 0.0


def test_lovasz_matches_extension_oracle_n5():
    rng = np.random.default_rng(42)
    s = rng.standard_normal(5)
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    assert abs(lovasz_hinge(Tensor(s), y).item() - lovasz_oracle(s, y)) < 1e-9


@pytest.mark.parametrize("seed", range(30))
def test_lovasz_matches_extension_oracle_all_small_n(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    s = rng.standard_normal(n) * 2
    y = (rng.random(n) > 0.5).astype(float)
    if y.sum() == 0:
        y[int(rng.integers(0, n))] = 1.0
    assert abs(lovasz_hinge(Tensor(s), y).item() - lovasz_oracle(s, y)) < 1e-9


def test_lovasz_permutation_invariant():
    rng = np.random.default_rng(3)
    s = rng.standard_normal(12)
    y = (rng.random(12) > 0.5).astype(float)
    base = lovasz_hinge(Tensor(s), y).item()
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(12)
        assert lovasz_hinge(Tensor(s[perm]), y[perm]).item() == pytest.approx(base, abs=1e-12)


# --- chamfer distance ---------------------------------------------------------


def chamfer_oracle(a: np.ndarray, b: np.ndarray) -> float:
    fwd = [min(((ax - bx) ** 2 + (ay - by) ** 2) for bx, by in b) for ax, ay in a]
    bwd = [min(((ax - bx) ** 2 + (ay - by) ** 2) for ax, ay in a) for bx, by in b]
    return sum(fwd) / len(fwd) + sum(bwd) / len(bwd)


def test_chamfer_identical_sets_zero():
    pts = np.random.default_rng(0).standard_normal((6, 2))
    assert chamfer(Tensor(pts), Tensor(pts.copy())).item() == 0.0


def test_chamfer_single_pair():
    a = Tensor(np.array([[0.0, 0.0]]))
    b = Tensor(np.array([[3.0, 4.0]]))
    assert chamfer(a, b).item() == 50.0


def test_chamfer_offset_squares_matches_brute_force():
    sq = np.array([[0.0, 0.0], [0.0, 4.0], [4.0, 4.0], [4.0, 0.0]])
    shifted = sq + np.array([1.0, 0.0])
    got = chamfer(Tensor(sq), Tensor(shifted)).item()
    assert got == chamfer_oracle(sq, shifted)


def test_chamfer_symmetric_exactly():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((5, 2))
    b = rng.standard_normal((8, 2))
    assert chamfer(Tensor(a), Tensor(b)).item() == chamfer(Tensor(b), Tensor(a)).item()


def test_chamfer_translation_invariant():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 2))
    b = rng.standard_normal((4, 2))
    base = chamfer(Tensor(a), Tensor(b)).item()
    moved = chamfer(Tensor(a + 17.25), Tensor(b + 17.25)).item()
    assert abs(base - moved) < 1e-9


def test_chamfer_empty_set_rejected():
    with pytest.raises(ValueError):
        chamfer(Tensor(np.zeros((0, 2))), Tensor(np.zeros((3, 2))))


# --- combination ---------------------------------------------------------------


def _toy_inputs(seed=0):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((2, 6, 6)))
    aux = Tensor(rng.standard_normal((2, 6, 6)))
    labels = (rng.random((6, 6)) > 0.6).astype(float)
    pred = [Tensor(rng.standard_normal((8, 2)) + 3.0)]
    truth = [rng.standard_normal((10, 2)) + 3.2]
    return logits, aux, labels, pred, truth


def test_total_loss_reduces_to_l1_plus_aux():
    logits, aux, labels, _, _ = _toy_inputs()
    w = LossWeights(gamma=0.0, theta=0.0, aux=0.4)
    total, parts = total_loss(logits, aux, labels, weights=w)
    assert total.item() == pytest.approx(parts["L1"] + 0.4 * parts["aux"], abs=1e-12)


def test_total_loss_components_sum():
    logits, aux, labels, pred, truth = _toy_inputs(3)
    w = LossWeights(gamma=1.0, theta=0.1, aux=0.4)
    total, parts = total_loss(logits, aux, labels, pred, truth, weights=w)
    recomposed = parts["L1"] + w.gamma * parts["L2"] + w.theta * parts["L3"] + w.aux * parts["aux"]
    assert abs(total.item() - recomposed) < 1e-12


def test_total_loss_matches_independent_recomposition():
    logits, aux, labels, pred, truth = _toy_inputs(7)
    w = LossWeights(gamma=0.7, theta=0.2, aux=0.3)
    wp, wn = class_balance_weights(labels)
    total, _ = total_loss(logits, aux, labels, pred, truth, weights=w)

    margin = logits.data[1].reshape(-1) - logits.data[0].reshape(-1)
    l1 = weighted_bce_logits(Tensor(margin), labels.reshape(-1), wp, wn).item()
    l2 = lovasz_hinge(Tensor(margin), labels.reshape(-1)).item()
    l3 = chamfer(pred[0], Tensor(truth[0])).item()
    aux_margin = aux.data[1].reshape(-1) - aux.data[0].reshape(-1)
    la = weighted_bce_logits(Tensor(aux_margin), labels.reshape(-1), wp, wn).item()
    assert total.item() == pytest.approx(l1 + 0.7 * l2 + 0.2 * l3 + 0.3 * la, abs=1e-12)


def test_total_loss_skips_chamfer_without_polygons():
    logits, aux, labels, pred, _ = _toy_inputs(11)
    _, parts = total_loss(logits, aux, labels, pred, [], weights=LossWeights())
    assert parts["L3"] == 0.0


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    y = (rng.random(10) > 0.5).astype(float)
    y[0] = 1.0

    s = Tensor(rng.standard_normal(10) * 1.5, requires_grad=True)
    assert finite_difference_check(lambda s: weighted_bce_logits(s, y, 1.2, 0.8), [s]) < 1e-4

    s2 = Tensor(rng.standard_normal(10) * 1.5, requires_grad=True)
    assert finite_difference_check(lambda s: lovasz_hinge(s, y), [s2]) < 1e-4

    a = Tensor(rng.standard_normal((6, 2)) * 2, requires_grad=True)
    b = Tensor(rng.standard_normal((5, 2)) * 2, requires_grad=True)
    assert finite_difference_check(lambda a, b: chamfer(a, b), [a, b]) < 1e-4
