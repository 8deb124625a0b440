"""Central finite-difference verification of analytic gradients.

`finite_difference_check` probes one scalar-valued function; `run_suite`
executes the registry of per-operation checks that covers every
differentiable operation in the package, and is shared by the test suite
and the command-line `gradcheck` entry point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(fn, inputs, step: float = DEFAULT_STEP,
                            max_entries: int = 48,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() gradients and central differences.

    ``fn(*inputs)`` must return a scalar Tensor and be deterministic. For
    large inputs a random subset of entries is probed.
    """
    rng = rng or np.random.default_rng(0)
    out = fn(*inputs)
    for t in inputs:
        t.zero_grad()
    out.backward()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            entries = np.arange(n)
        else:
            entries = rng.choice(n, size=max_entries, replace=False)
        numeric = np.empty(len(entries))
        for j, idx in enumerate(entries):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = fn(*inputs).item()
            flat[idx] = orig - step
            lo = fn(*inputs).item()
            flat[idx] = orig
            numeric[j] = (hi - lo) / (2.0 * step)
        worst = max(worst, relative_error(analytic.reshape(-1)[entries], numeric))
    return worst


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _core_op_cases():
    """name -> builder(seed) returning (fn, inputs)."""
    from . import ops
    from .tensor import clip, concat, matmul, pad2d, roll, take

    def c_matmul(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4, 2)
        w = Tensor(rng.standard_normal((3, 2)))
        return lambda a, b: (matmul(a, b) * w).sum(), [a, b]

    def c_matmul_batched(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 2, 3, 4)
        b = _leaf(rng, 4, 3)
        w = Tensor(rng.standard_normal((2, 3, 3)))
        return lambda a, b: (matmul(a, b) * w).sum(), [a, b]

    def c_elementwise(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 5)
        b = _leaf(rng, 5)
        return lambda a, b: ((a * b + a - b / (b * b + 4.0)) ** 2.0).sum(), [a, b]

    def c_pointwise(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 6, scale=0.7)
        offset = Tensor(np.full(6, 2.5))
        return (
            lambda x: ((x.exp().sigmoid() + ((x + offset).log() + 2.0).sqrt()).relu()
                       + x.softplus()).sum(),
            [x],
        )

    def c_softmax(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 4, 5)
        w = Tensor(rng.standard_normal((4, 5)))
        return lambda x: (ops.softmax(x, axis=1) * w).sum(), [x]

    def c_reduce_shape(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 3, 4, 2)
        w = Tensor(rng.standard_normal((4, 6)))
        return (
            lambda x: (x.transpose(1, 0, 2).reshape(4, 6) * w).sum()
            + x.mean() + x.sum(axis=1).sum(),
            [x],
        )

    def c_concat_pad_slice(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 2, 3, 3)
        b = _leaf(rng, 1, 3, 3)
        w = Tensor(rng.standard_normal((3, 5, 4)))
        return (
            lambda a, b: (pad2d(concat([a, b], axis=0), 1, 1, 0, 1) * w).sum()
            + (a[0, 1:, :] * 2.0).sum(),
            [a, b],
        )

    def c_take_roll_clip(seed):
        rng = np.random.default_rng(seed)
        data = rng.uniform(-0.8, 0.8, size=(6, 3))
        far = rng.random((6, 3)) < 0.3
        data[far] = rng.uniform(1.2, 2.0, size=int(far.sum())) * np.sign(data[far])
        x = Tensor(data, requires_grad=True)  # values kept away from the clip kinks
        idx = np.random.default_rng(seed + 1).integers(0, 6, size=8)
        w = Tensor(np.random.default_rng(seed + 2).standard_normal((8, 3)))
        return (
            lambda x: (take(x, idx, axis=0) * w).sum()
            + (roll(x, 2, axis=0) * 0.5).sum() + clip(x, -1.0, 1.0).sum(),
            [x],
        )

    def c_conv3x3(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 2, 5, 6)
        w = _leaf(rng, 3, 2, 3, 3, scale=0.5)
        b = _leaf(rng, 3, scale=0.3)
        wt = Tensor(rng.standard_normal((3, 5, 6)))
        return lambda x, w, b: (ops.conv2d_3x3(x, w, b) * wt).sum(), [x, w, b]

    def c_conv3x3_s2(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 2, 6, 5)
        w = _leaf(rng, 2, 2, 3, 3, scale=0.5)
        wt = Tensor(rng.standard_normal((2, 3, 3)))
        return lambda x, w: (ops.conv2d_3x3(x, w, stride=2) * wt).sum(), [x, w]

    def c_depthwise(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 3, 4, 4)
        k = _leaf(rng, 3, 3, 3, scale=0.5)
        wt = Tensor(rng.standard_normal((3, 4, 4)))
        return lambda x, k: (ops.depthwise_conv3x3(x, k) * wt).sum(), [x, k]

    def c_conv1x1(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 3, 4, 4)
        w = _leaf(rng, 2, 3)
        b = _leaf(rng, 2)
        wt = Tensor(rng.standard_normal((2, 4, 4)))
        return lambda x, w, b: (ops.conv1x1(x, w, b) * wt).sum(), [x, w, b]

    def c_batchnorm(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 3, 4, 5)
        gamma = _leaf(rng, 3, scale=0.5)
        beta = _leaf(rng, 3, scale=0.5)
        wt = Tensor(rng.standard_normal((3, 4, 5)))
        return (
            lambda x, gamma, beta: (ops.spatial_batchnorm(x, gamma, beta) * wt).sum(),
            [x, gamma, beta],
        )

    def c_resize(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 2, 3, 4)
        wt = Tensor(rng.standard_normal((2, 7, 5)))
        return lambda x: (ops.bilinear_resize(x, 7, 5) * wt).sum(), [x]

    def c_sample(seed):
        rng = np.random.default_rng(seed)
        field = _leaf(rng, 6, 6)
        pts = rng.uniform(0.55, 4.45, size=(7, 2))
        pts += np.where(np.abs(pts - np.round(pts)) < 0.05, 0.1, 0.0)
        p = Tensor(pts, requires_grad=True)
        wt = Tensor(rng.standard_normal(7))
        return lambda field, p: (ops.bilinear_sample(field, p) * wt).sum(), [field, p]

    def c_dropout(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 4, 4)
        wt = Tensor(rng.standard_normal((4, 4)))

        def fn(x):
            local = np.random.default_rng(seed + 99)
            from .ops import dropout
            return (dropout(x, 0.4, local, training=True) * wt).sum()

        return fn, [x]

    return {
        "tensor.matmul": c_matmul,
        "tensor.matmul_batched": c_matmul_batched,
        "tensor.elementwise": c_elementwise,
        "tensor.pointwise": c_pointwise,
        "ops.softmax": c_softmax,
        "tensor.reduce_reshape": c_reduce_shape,
        "tensor.concat_pad_slice": c_concat_pad_slice,
        "tensor.take_roll_clip": c_take_roll_clip,
        "ops.conv2d_3x3": c_conv3x3,
        "ops.conv2d_3x3_stride2": c_conv3x3_s2,
        "ops.depthwise_conv3x3": c_depthwise,
        "ops.conv1x1": c_conv1x1,
        "ops.spatial_batchnorm": c_batchnorm,
        "ops.bilinear_resize": c_resize,
        "ops.bilinear_sample": c_sample,
        "ops.dropout": c_dropout,
    }


def _model_op_cases():
    from .attention import attention_cases
    from .contours import contour_cases
    from .losses import loss_cases
    from .network import network_cases
    from .region_context import region_cases

    cases = {}
    cases.update(attention_cases())
    cases.update(network_cases())
    cases.update(region_cases())
    cases.update(loss_cases())
    cases.update(contour_cases())
    return cases


def all_cases():
    cases = _core_op_cases()
    cases.update(_model_op_cases())
    return cases


def run_suite(n_cases: int = 20, tol: float = DEFAULT_TOL,
              names: list[str] | None = None) -> list[CheckResult]:
    """Run every registered check over ``n_cases`` seeds."""
    cases = all_cases()
    if names is not None:
        cases = {k: v for k, v in cases.items() if k in names}
    results = []
    for name, builder in cases.items():
        worst = 0.0
        for seed in range(n_cases):
            fn, inputs = builder(seed)
            worst = max(worst, finite_difference_check(fn, inputs))
        results.append(CheckResult(name, n_cases, worst, tol))
    return results
