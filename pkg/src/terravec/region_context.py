"""Object-region context refinement.

Coarse per-class score maps are turned into region summary vectors by a
per-region spatial softmax over pixel features. Every pixel is then
related to every region summary through learned transforms, and the
classifier runs on the pixel feature concatenated with its
relation-weighted region context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Conv1x1, Linear, Module, ones_param, zeros_param
from .tensor import ShapeError, Tensor, concat

__all__ = [
    "SoftObjectRegions",
    "RegionBank",
    "soft_object_regions",
    "region_representation",
    "pixel_region_relation",
    "augment_and_classify",
    "RegionContextHead",
    "RegionHeadOutput",
]


@dataclass
class SoftObjectRegions:
    """Raw per-class score maps plus their per-region spatial normalization.

    ``normalized`` rows sum to one over all pixels of the map.
    """

    scores: Tensor      # (M, H, W)
    normalized: Tensor  # (M, H * W)


@dataclass
class RegionBank:
    vectors: Tensor  # (M, D)


def soft_object_regions(scores: Tensor) -> SoftObjectRegions:
    """Spatial softmax of each region's score map."""
    m = scores.shape[0]
    flat = scores.reshape(m, -1)
    return SoftObjectRegions(scores=scores, normalized=ops.softmax(flat, axis=1))


def region_representation(features: Tensor, regions: SoftObjectRegions) -> RegionBank:
    """Weight-average pixel features into one summary vector per region."""
    d = features.shape[0]
    if features.shape[1:] != regions.scores.shape[1:]:
        raise ShapeError(
            f"features {features.shape} and region scores {regions.scores.shape} "
            "disagree spatially"
        )
    pixels = features.reshape(d, -1)  # (D, N)
    vectors = regions.normalized @ pixels.transpose(1, 0)  # (M, D)
    return RegionBank(vectors=vectors)


class VectorTransform(Module):
    """Affine map on a stack of vectors with per-feature normalization and ReLU."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.linear = Linear(rng, d_in, d_out)
        self.gamma = ones_param(d_out)
        self.beta = zeros_param(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.linear(x)  # (M, d_out)
        m, d = y.shape
        as_map = y.transpose(1, 0).reshape(d, m, 1)
        normed = ops.spatial_batchnorm(as_map, self.gamma, self.beta)
        return normed.reshape(d, m).transpose(1, 0).relu()


def pixel_region_relation(features: Tensor, bank: RegionBank,
                          chi, phi) -> Tensor:
    """Distribution over regions for every pixel.

    ``chi`` maps the (D, H, W) features and ``phi`` the (M, D) bank into a
    shared key space; the softmax over regions of their inner products
    gives the per-pixel relation weights (M, H, W).
    """
    d, h, w = features.shape
    keys_px = chi(features)                 # (Dk, H, W)
    dk = keys_px.shape[0]
    keys_px = keys_px.reshape(dk, h * w).transpose(1, 0)  # (N, Dk)
    keys_rg = phi(bank.vectors)             # (M, Dk)
    logits = keys_px @ keys_rg.transpose(1, 0)  # (N, M)
    mu = ops.softmax(logits, axis=1)
    return mu.transpose(1, 0).reshape(-1, h, w)  # (M, H, W)


def region_context_features(features: Tensor, bank: RegionBank, mu: Tensor,
                            phi_context) -> Tensor:
    """Concatenate each pixel feature with its relation-weighted region context."""
    d, h, w = features.shape
    m = mu.shape[0]
    ctx_vectors = phi_context(bank.vectors)  # (M, D)
    mu_px = mu.reshape(m, h * w).transpose(1, 0)  # (N, M)
    context = (mu_px @ ctx_vectors).transpose(1, 0).reshape(d, h, w)
    return concat([features, context], axis=0)


def augment_and_classify(features: Tensor, bank: RegionBank, mu: Tensor,
                         phi_context, classifier, out_size: int) -> Tensor:
    """Classify [pixel feature, relation-weighted region context] pairs.

    Returns per-class logits bilinearly upsampled to the label grid.
    """
    augmented = region_context_features(features, bank, mu, phi_context)
    logits = classifier(augmented)
    return ops.bilinear_resize(logits, out_size, out_size)


@dataclass
class RegionHeadOutput:
    logits: Tensor        # (M, out, out)
    mu: Tensor            # (M, H, W)
    regions: SoftObjectRegions
    bank: RegionBank
    augmented: Tensor     # (2D, H, W)


class RegionContextHead(Module):
    """Region-context classification head over encoder pixel features."""

    def __init__(self, rng, feature_dim: int, n_regions: int = 2,
                 key_dim: int | None = None):
        key_dim = key_dim or feature_dim
        self.chi = Conv1x1(rng, feature_dim, key_dim, norm_relu=True)
        self.phi = VectorTransform(rng, feature_dim, key_dim)
        self.phi_context = VectorTransform(rng, feature_dim, feature_dim)
        self.classifier = Conv1x1(rng, 2 * feature_dim, n_regions)

    def __call__(self, features: Tensor, region_scores: Tensor,
                 out_size: int) -> RegionHeadOutput:
        regions = soft_object_regions(region_scores)
        bank = region_representation(features, regions)
        mu = pixel_region_relation(features, bank, self.chi, self.phi)
        augmented = region_context_features(features, bank, mu, self.phi_context)
        logits = ops.bilinear_resize(self.classifier(augmented), out_size, out_size)
        return RegionHeadOutput(logits, mu, regions, bank, augmented)


def region_cases():
    """Gradient-check builders for this module."""
    from .gradcheck import _leaf

    def c_region_representation(seed):
        rng = np.random.default_rng(seed)
        v = _leaf(rng, 4, 3, 3)
        scores = _leaf(rng, 2, 3, 3, scale=1.5)
        wt = Tensor(rng.standard_normal((2, 4)))

        def fn(v, scores):
            bank = region_representation(v, soft_object_regions(scores))
            return (bank.vectors * wt).sum()

        return fn, [v, scores]

    def c_region_head(seed):
        rng = np.random.default_rng(seed)
        head = RegionContextHead(rng, feature_dim=3, n_regions=2, key_dim=3)
        v = _leaf(rng, 3, 3, 3, scale=0.8)
        scores = _leaf(rng, 2, 3, 3, scale=0.8)
        wt = Tensor(rng.standard_normal((2, 6, 6)))

        def fn(v, scores):
            return (head(v, scores, out_size=6).logits * wt).sum()

        return fn, [v, scores]

    return {
        "region_context.representation": c_region_representation,
        "region_context.head": c_region_head,
    }
