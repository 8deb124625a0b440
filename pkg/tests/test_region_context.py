"""Region summary, pixel-region relation, and the augmented classifier."""

import numpy as np
import pytest

from terravec.gradcheck import finite_difference_check
from terravec.layers import Conv1x1
from terravec.losses import weighted_bce_logits
from terravec.ops import bilinear_resize
from terravec.region_context import (
    RegionBank,
    RegionContextHead,
    SoftObjectRegions,
    augment_and_classify,
    pixel_region_relation,
    region_representation,
    soft_object_regions,
)
from terravec.tensor import ShapeError, Tensor


def test_uniform_weights_give_mean_feature():
    rng = np.random.default_rng(0)
    v = Tensor(rng.standard_normal((5, 4, 4)))
    regions = soft_object_regions(Tensor(np.zeros((2, 4, 4))))
    bank = region_representation(v, regions)
    expected = v.data.reshape(5, -1).mean(axis=1)
    np.testing.assert_allclose(bank.vectors.data[0], expected, atol=1e-12)
    np.testing.assert_allclose(bank.vectors.data[1], expected, atol=1e-12)


def test_one_hot_weights_select_single_pixel():
    rng = np.random.default_rng(1)
    v = Tensor(rng.standard_normal((3, 2, 2)))
    one_hot = np.zeros((2, 4))
    one_hot[0, 3] = 1.0
    one_hot[1, 0] = 1.0
    regions = SoftObjectRegions(scores=Tensor(np.zeros((2, 2, 2))),
                                normalized=Tensor(one_hot))
    bank = region_representation(v, regions)
    np.testing.assert_array_equal(bank.vectors.data[0], v.data.reshape(3, -1)[:, 3])
    np.testing.assert_array_equal(bank.vectors.data[1], v.data.reshape(3, -1)[:, 0])


def test_region_representation_matches_direct_sum():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((3, 2, 2))
    scores = rng.standard_normal((2, 2, 2))
    regions = soft_object_regions(Tensor(scores))
    bank = region_representation(Tensor(v), regions)

    flat_v = v.reshape(3, 4)
    for m in range(2):
        s = scores[m].reshape(-1)
        w = np.exp(s - s.max())
        w = w / w.sum()
        expected = (flat_v * w[None, :]).sum(axis=1)
        assert np.max(np.abs(bank.vectors.data[m] - expected)) < 1e-12


def test_region_representation_shape_mismatch():
    with pytest.raises(ShapeError):
        region_representation(
            Tensor(np.zeros((3, 4, 4))),
            soft_object_regions(Tensor(np.zeros((2, 3, 3)))),
        )


def test_normalized_weights_sum_to_one():
    rng = np.random.default_rng(3)
    regions = soft_object_regions(Tensor(rng.standard_normal((2, 5, 5)) * 4))
    np.testing.assert_allclose(regions.normalized.data.sum(axis=1), 1.0, atol=1e-9)


def test_region_shift_invariance_is_exact():
    scores = np.random.default_rng(4).integers(-3, 4, size=(2, 3, 3)).astype(float)
    base = soft_object_regions(Tensor(scores)).normalized.data
    shifted = scores.copy()
    shifted[1] += 5.0  # constant added to one region's scores only
    after = soft_object_regions(Tensor(shifted)).normalized.data
    np.testing.assert_array_equal(after[1], base[1])


def _identity_transform(x):
    return x


def test_equal_relations_give_uniform_mu():
    v = Tensor(np.zeros((3, 2, 2)))
    bank = RegionBank(vectors=Tensor(np.zeros((4, 3))))
    mu = pixel_region_relation(v, bank, _identity_transform, _identity_transform)
    np.testing.assert_allclose(mu.data, 0.25, atol=1e-12)


def test_mu_rows_sum_to_one():
    rng = np.random.default_rng(5)
    head = RegionContextHead(rng, feature_dim=4, n_regions=3)
    v = Tensor(rng.standard_normal((4, 4, 4)))
    mu = pixel_region_relation(v, RegionBank(Tensor(rng.standard_normal((3, 4)))),
                               head.chi, head.phi)
    np.testing.assert_allclose(mu.data.sum(axis=0), 1.0, atol=1e-9)


def test_mu_matches_hand_softmax():
    v = Tensor(np.array([[[1.0, 0.0]], [[0.0, 2.0]]]))  # D=2, 1x2 grid
    bank = RegionBank(vectors=Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])))
    mu = pixel_region_relation(v, bank, _identity_transform, _identity_transform)
    logits = np.array([[1.0, 0.0], [0.0, 2.0]])  # pixel x region inner products
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    expected = (e / e.sum(axis=1, keepdims=True)).T.reshape(2, 1, 2)
    np.testing.assert_allclose(mu.data, expected, atol=1e-12)


def test_uniform_mu_identical_bank_gives_constant_context():
    rng = np.random.default_rng(6)
    d, h, w = 3, 2, 2
    v = Tensor(rng.standard_normal((d, h, w)))
    vec = rng.standard_normal(3)
    bank = RegionBank(vectors=Tensor(np.stack([vec, vec])))
    mu = Tensor(np.full((2, h, w), 0.5))
    classifier = Conv1x1(np.random.default_rng(7), 2 * d, 2)
    logits = augment_and_classify(v, bank, mu, _identity_transform, classifier, out_size=2)
    assert logits.shape == (2, 2, 2)
    # the context half of the input is constant, so differences in logits
    # across pixels must come from the feature half alone
    ctx_only = Conv1x1(np.random.default_rng(7), 2 * d, 2)
    ctx_only.weight.data = classifier.weight.data.copy()
    ctx_only.weight.data[:, :d] = 0.0
    ctx_logits = augment_and_classify(v, bank, mu, _identity_transform, ctx_only, out_size=2)
    spread = ctx_logits.data.reshape(2, -1)
    np.testing.assert_allclose(spread - spread[:, :1], 0.0, atol=1e-12)


def test_single_region_context_constant_everywhere():
    rng = np.random.default_rng(8)
    head = RegionContextHead(rng, feature_dim=4, n_regions=1)
    v = Tensor(rng.standard_normal((4, 3, 3)))
    scores = Tensor(rng.standard_normal((1, 3, 3)))
    mu = head(v, scores, out_size=3).mu
    np.testing.assert_allclose(mu.data, 1.0, atol=1e-12)


def test_head_output_shapes():
    rng = np.random.default_rng(9)
    head = RegionContextHead(rng, feature_dim=6, n_regions=2)
    v = Tensor(rng.standard_normal((6, 4, 4)))
    scores = Tensor(rng.standard_normal((2, 4, 4)))
    out = head(v, scores, out_size=16)
    logits, mu, bank = out.logits, out.mu, out.bank
    assert out.augmented.shape == (12, 4, 4)
    assert logits.shape == (2, 16, 16)
    assert mu.shape == (2, 4, 4)
    assert bank.vectors.shape == (2, 6)


def test_head_matches_composition_of_stage_functions():
    rng = np.random.default_rng(10)
    head = RegionContextHead(rng, feature_dim=3, n_regions=2)
    v = Tensor(np.random.default_rng(11).standard_normal((3, 3, 3)))
    scores = Tensor(np.random.default_rng(12).standard_normal((2, 3, 3)))

    logits = head(v, scores, out_size=6).logits

    regions = soft_object_regions(scores)
    bank = region_representation(v, regions)
    mu = pixel_region_relation(v, bank, head.chi, head.phi)
    expected = augment_and_classify(v, bank, mu, head.phi_context,
                                    head.classifier, out_size=6)
    np.testing.assert_array_equal(logits.data, expected.data)


def test_gradient_reaches_score_head_through_weights_and_aux():
    rng = np.random.default_rng(13)
    soft_conv = Conv1x1(rng, 4, 2)
    head = RegionContextHead(rng, feature_dim=4, n_regions=2)
    v = Tensor(np.random.default_rng(14).standard_normal((4, 4, 4)))
    labels = (np.random.default_rng(15).random((8, 8)) > 0.5).astype(float)

    # main path only: gradient flows into the score conv through the
    # spatial-softmax region weights
    scores = soft_conv(v)
    logits = head(v, scores, out_size=8).logits
    margin = (logits[1] - logits[0]).reshape(-1)
    weighted_bce_logits(margin, labels.reshape(-1)).backward()
    assert soft_conv.weight.grad is not None
    assert np.abs(soft_conv.weight.grad).max() > 0

    # coarse-supervision path reaches it as well
    soft_conv.zero_grads()
    scores = soft_conv(v)
    aux = bilinear_resize(scores, 8, 8)
    aux_margin = (aux[1] - aux[0]).reshape(-1)
    weighted_bce_logits(aux_margin, labels.reshape(-1)).backward()
    assert np.abs(soft_conv.weight.grad).max() > 0


def test_head_gradcheck():
    rng = np.random.default_rng(16)
    head = RegionContextHead(rng, feature_dim=3, n_regions=2, key_dim=3)
    v = Tensor(np.random.default_rng(17).standard_normal((3, 3, 3)), requires_grad=True)
    scores = Tensor(np.random.default_rng(18).standard_normal((2, 3, 3)), requires_grad=True)
    wt = Tensor(np.random.default_rng(19).standard_normal((2, 6, 6)))

    def fn(v, scores):
        return (head(v, scores, out_size=6).logits * wt).sum()

    assert finite_difference_check(fn, [v, scores]) < 1e-4
