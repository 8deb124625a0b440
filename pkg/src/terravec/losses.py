"""Training losses: class-weighted cross-entropy, a Jaccard hinge
surrogate for boundary quality, and symmetric chamfer distance between
vertex sets, plus their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _node, as_tensor, clip, take

__all__ = [
    "LossWeights",
    "class_balance_weights",
    "weighted_bce",
    "weighted_bce_logits",
    "lovasz_hinge",
    "chamfer",
    "total_loss",
]

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    """Combination weights; the chamfer term is kept small because it is
    measured in squared pixels."""

    gamma: float = 1.0    # Jaccard hinge weight
    theta: float = 0.1    # chamfer weight
    aux: float = 0.4      # coarse-supervision weight


def class_balance_weights(labels: np.ndarray) -> tuple[float, float]:
    """Inverse-frequency class weights normalized so w_pos + w_neg = 2.

    Falls back to (1, 1) when a class is absent from the batch.
    """
    y = np.asarray(labels)
    n = y.size
    pos = float((y == 1).sum())
    neg = float(n - pos)
    if pos == 0 or neg == 0:
        return 1.0, 1.0
    return 2.0 * neg / n, 2.0 * pos / n


def _flat_pair(a, y):
    a = as_tensor(a).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.shape[0] != y.shape[0]:
        raise ShapeError(f"prediction shape {a.shape} does not match labels {y.shape}")
    return a, y


def weighted_bce(p: Tensor, y, w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """Class-weighted binary cross-entropy on probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    p, yf = _flat_pair(p, y)
    p = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = Tensor(yf * w_pos)
    neg = Tensor((1.0 - yf) * w_neg)
    return -(pos * p.log() + neg * (1.0 - p).log()).mean()


def weighted_bce_logits(scores: Tensor, y, w_pos: float = 1.0,
                        w_neg: float = 1.0) -> Tensor:
    """The same loss evaluated from logits through softplus, which stays
    finite for any score magnitude."""
    s, yf = _flat_pair(scores, y)
    pos = Tensor(yf * w_pos)
    neg = Tensor((1.0 - yf) * w_neg)
    return (pos * (-s).softplus() + neg * s.softplus()).mean()


def lovasz_hinge(scores: Tensor, y) -> Tensor:
    """Jaccard-loss surrogate via the Lovasz extension of the hinge errors.

    ``scores`` are signed margins with positive meaning foreground. Ties in
    the descending error sort are broken by input index (stable sort). An
    all-background target yields zero by definition.
    """
    s, yf = _flat_pair(scores, y)
    if yf.sum() == 0:
        return Tensor(0.0)
    signs = 2.0 * yf - 1.0
    errors = (1.0 - s * Tensor(signs)).relu()
    order = np.argsort(-errors.data, kind="stable")
    sorted_errors = take(errors, order, axis=0)
    gt_sorted = yf[order]
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    grad = jaccard.copy()
    grad[1:] = jaccard[1:] - jaccard[:-1]
    return (sorted_errors * Tensor(grad)).sum()


def chamfer(a: Tensor, b: Tensor) -> Tensor:
    """Symmetric chamfer distance between two vertex sets.

    Per-vertex mean of squared nearest-neighbor distances, summed over
    both directions; symmetric in its arguments.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"chamfer expects (N,d) and (M,d), got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance of an empty vertex set is undefined")
    n, m = a.shape[0], b.shape[0]
    diff = a.data[:, None, :] - b.data[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    nearest_b = d2.argmin(axis=1)
    nearest_a = d2.argmin(axis=0)
    value = d2[np.arange(n), nearest_b].mean() + d2[nearest_a, np.arange(m)].mean()

    def vjp(g):
        g = float(g)
        ga = np.zeros_like(a.data)
        gb = np.zeros_like(b.data)
        d_ab = 2.0 * (a.data - b.data[nearest_b]) / n
        ga += g * d_ab
        np.add.at(gb, nearest_b, -g * d_ab)
        d_ba = 2.0 * (b.data - a.data[nearest_a]) / m
        gb += g * d_ba
        np.add.at(ga, nearest_a, -g * d_ba)
        return ga, gb

    return _node(np.asarray(value), (a, b), vjp)


def _match_polygons(pred_vertices: list, truth_vertices: list) -> list[tuple[int, int]]:
    """Greedy nearest-centroid pairing of predicted and reference polygons."""
    truth_centroids = np.array([np.asarray(t).mean(axis=0) for t in truth_vertices])
    pairs = []
    for i, p in enumerate(pred_vertices):
        c = (p.data if isinstance(p, Tensor) else np.asarray(p)).mean(axis=0)
        j = int(np.argmin(((truth_centroids - c) ** 2).sum(axis=1)))
        pairs.append((i, j))
    return pairs


def total_loss(logits: Tensor, aux_logits: Tensor | None, labels: np.ndarray,
               pred_polygons: list | None = None,
               truth_polygons: list | None = None,
               weights: LossWeights | None = None,
               class_weights: tuple[float, float] | None = None):
    """Weighted sum of the three losses plus coarse supervision.

    ``logits`` and ``aux_logits`` are (2, H, W) class scores on the label
    grid. The chamfer term contributes zero whenever either polygon list is
    empty. Returns the scalar tensor and a per-component breakdown.
    """
    weights = weights or LossWeights()
    w_pos, w_neg = class_weights or class_balance_weights(labels)
    margin = (logits[1] - logits[0]).reshape(-1)
    l1 = weighted_bce_logits(margin, labels, w_pos, w_neg)
    l2 = lovasz_hinge(margin, labels)
    if pred_polygons and truth_polygons:
        pairs = _match_polygons(pred_polygons, truth_polygons)
        terms = [chamfer(as_tensor(pred_polygons[i]), as_tensor(truth_polygons[j]))
                 for i, j in pairs]
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        l3 = acc if len(terms) == 1 else acc * (1.0 / len(terms))
    else:
        l3 = Tensor(0.0)
    if aux_logits is not None:
        aux_margin = (aux_logits[1] - aux_logits[0]).reshape(-1)
        aux = weighted_bce_logits(aux_margin, labels, w_pos, w_neg)
    else:
        aux = Tensor(0.0)
    total = l1 + weights.gamma * l2 + weights.theta * l3 + weights.aux * aux
    components = {
        "L1": l1.item(),
        "L2": l2.item(),
        "L3": l3.item(),
        "aux": aux.item(),
        "total": total.item(),
        "w_pos": w_pos,
        "w_neg": w_neg,
    }
    return total, components


def loss_cases():
    """Gradient-check builders for this module."""
    from .gradcheck import _leaf

    def c_bce_probs(seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.uniform(0.05, 0.95, size=12), requires_grad=True)
        y = (rng.random(12) > 0.5).astype(float)
        return lambda p: weighted_bce(p, y, 1.3, 0.7), [p]

    def c_bce_logits(seed):
        rng = np.random.default_rng(seed)
        s = _leaf(rng, 12, scale=2.0)
        y = (rng.random(12) > 0.5).astype(float)
        return lambda s: weighted_bce_logits(s, y, 0.8, 1.2), [s]

    def c_lovasz(seed):
        rng = np.random.default_rng(seed)
        s = _leaf(rng, 9, scale=1.5)
        y = (rng.random(9) > 0.4).astype(float)
        if y.sum() == 0:
            y[0] = 1.0
        return lambda s: lovasz_hinge(s, y), [s]

    def c_chamfer(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 5, 2, scale=3.0)
        b = _leaf(rng, 7, 2, scale=3.0)
        return lambda a, b: chamfer(a, b), [a, b]

    return {
        "losses.weighted_bce": c_bce_probs,
        "losses.weighted_bce_logits": c_bce_logits,
        "losses.lovasz_hinge": c_lovasz,
        "losses.chamfer": c_chamfer,
    }
