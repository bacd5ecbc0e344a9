"""Finite-difference gradient checks over every differentiable op and the composed modules.

Each case builds fresh inputs from a seed and reduces the op output to a
scalar with a fixed random weighting, so every output element contributes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import DecoderConfig, FusionConfig, ModelConfig, StageConfig
from .encoder import Block
from .fusion import FusionBlock
from .model import build
from .tensor import Tensor
from .training import cross_entropy

TOLERANCE = {"float32": 1e-2, "float64": 1e-5}


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    max_coords: int | None = None


def _leaf(rng, shape, low=None):
    a = rng.normal(size=shape)
    if low is not None:  # keep away from kinks / poles
        a = np.sign(a) * (np.abs(a) + low)
    return Tensor(a, requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _case(fn):
    """Wrap ``fn(rng) -> (forward, inputs)`` so the output weighting is fixed per case."""
    def b(rng):
        fwd, xs = fn(rng)
        w_seed = int(rng.integers(1 << 31))
        return (lambda: _weighted(fwd(), np.random.default_rng(w_seed))), xs
    return b


def _binary(op, b_low=None, a_shape=(3, 4), b_shape=(3, 4)):
    def fn(rng):
        a, b = _leaf(rng, a_shape), _leaf(rng, b_shape, b_low)
        return (lambda: op(a, b)), [a, b]
    return _case(fn)


def _single(op, low=None, shape=(3, 4)):
    def fn(rng):
        x = _leaf(rng, shape, low)
        return (lambda: op(x)), [x]
    return _case(fn)


def _linear(rng):
    x, w, b = _leaf(rng, (5, 4)), _leaf(rng, (4, 3)), _leaf(rng, (3,))
    return (lambda: T.linear(x, w, b)), [x, w, b]


def _pointwise(rng):
    x, w, b = _leaf(rng, (4, 3, 5)), _leaf(rng, (4, 2)), _leaf(rng, (2,))
    return (lambda: T.pointwise_linear(x, w, b)), [x, w, b]


def _layer_norm(rng):
    x, g, b = _leaf(rng, (5, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    return (lambda: T.layer_norm(x, g, b)), [x, g, b]


def _conv(stride, pad, groups, cin=4, cout=4, k=3):
    def fn(rng):
        x = _leaf(rng, (cin, 7, 7))
        w, b = _leaf(rng, (cout, cin // groups, k, k)), _leaf(rng, (cout,))
        return (lambda: T.conv2d(x, w, b, stride=stride, pad=pad, groups=groups, exact=False)), [x, w, b]
    return fn


def _upsample(rng):
    x = _leaf(rng, (2, 3, 4))
    return (lambda: T.bilinear_upsample(x, 7, 9)), [x]


def _concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (4, 3))
    return (lambda: T.concat([a, b], axis=0)), [a, b]


def _cross_entropy(rng):
    logits = _leaf(rng, (4, 5, 5))
    labels = rng.integers(0, 4, size=(5, 5))
    labels[0, 0] = 255
    return (lambda: cross_entropy(logits, labels)), [logits]


def _clear_se_kinks(block: FusionBlock, feats, margin: float = 0.5) -> None:
    """Shift the SE bottleneck bias so no hidden pre-activation sits within ``margin`` of the relu kink."""
    seen = []
    gate = block.se.gate
    block.se.gate = lambda x: seen.append(x.data) or gate(x)
    with T.no_grad():
        block(feats)
    del block.se.gate
    pooled = seen[0].mean(axis=(1, 2))
    pre = pooled @ block.se.w1.weight.data + block.se.w1.bias.data
    block.se.w1.bias.data = block.se.w1.bias.data + np.where(pre >= 0, margin, -margin)


def _fusion(rng):
    cfg = FusionConfig(se_reduction=2)
    block = FusionBlock(4, 2, cfg, rng)
    feats = [_leaf(rng, (4, 6, 6)) for _ in range(2)]
    _clear_se_kinks(block, feats)
    return (lambda: block(feats)), feats + block.parameters()


def _encoder_block(rng):
    blk = Block(StageConfig(1, 8, 2, 4, 2), rng)
    x = _leaf(rng, (16, 8))
    return (lambda: blk(x, 4, 4)), [x] + blk.parameters()


def _tiny_model(rng):
    seed = int(rng.integers(1 << 16))
    model = build(ModelConfig(num_modalities=2, seed=seed, fusion=FusionConfig(se_reduction=4),
                              decoder=DecoderConfig(8, 3)))
    images = [Tensor(rng.normal(size=(3, 32, 32))) for _ in range(2)]
    labels = rng.integers(0, 3, size=(32, 32))
    return (lambda: cross_entropy(model(images), labels)), model.parameters()


CASES: list[GradCase] = [
    GradCase("add", _binary(T.add)),
    GradCase("add_broadcast", _binary(T.add, b_shape=(4,))),
    GradCase("sub", _binary(T.sub, b_shape=(3, 1))),
    GradCase("mul", _binary(T.mul, b_shape=(1, 4))),
    GradCase("div", _binary(T.div, b_low=0.5)),
    GradCase("relu", _single(T.relu, low=0.05)),
    GradCase("sigmoid", _single(T.sigmoid)),
    GradCase("gelu", _single(T.gelu)),
    GradCase("reshape", _single(lambda x: T.reshape(x, (2, 6)))),
    GradCase("transpose", _single(lambda x: T.transpose(x, (2, 0, 1)), shape=(2, 3, 4))),
    GradCase("concat", _case(_concat)),
    GradCase("sum_axis", _single(lambda x: T.tsum(x, axis=1, keepdims=True))),
    GradCase("mean", _single(lambda x: T.mean(x, axis=0))),
    GradCase("global_avg_pool", _single(T.global_avg_pool, shape=(3, 4, 5))),
    GradCase("matmul_2d", _binary(T.matmul, a_shape=(3, 4), b_shape=(4, 5))),
    GradCase("matmul_batched", _binary(T.matmul, a_shape=(2, 3, 4), b_shape=(2, 4, 5))),
    GradCase("linear", _case(_linear)),
    GradCase("pointwise_linear", _case(_pointwise)),
    GradCase("softmax", _single(lambda x: T.softmax(x, axis=-1))),
    GradCase("log_softmax", _single(lambda x: T.log_softmax(x, axis=0))),
    GradCase("layer_norm", _case(_layer_norm)),
    GradCase("conv2d_dense", _case(_conv(1, 1, 1))),
    GradCase("conv2d_strided", _case(_conv(2, 1, 1, cin=3, cout=5))),
    GradCase("conv2d_grouped", _case(_conv(1, 2, 2, k=5))),
    GradCase("conv2d_depthwise", _case(_conv(1, 3, 4, k=7))),
    GradCase("bilinear_upsample", _case(_upsample)),
    GradCase("cross_entropy", _case(_cross_entropy)),
    GradCase("fusion_block", _case(_fusion), max_coords=6),
    GradCase("encoder_block", _case(_encoder_block), max_coords=6),
    GradCase("tiny_model", _tiny_model, max_coords=3),
]


def run_case(case: GradCase, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    f, xs = case.build(rng)
    # float32: larger step so rounding noise (eps * |f| / h) stays well under the tolerance
    h = 1e-2 if T.default_dtype() == np.float32 else 1e-6
    return T.grad_check(f, xs, h=h, max_coords=case.max_coords, seed=seed)


def run_suite(dtype: str = "float64", seeds=(0,), cases=None) -> list[dict]:
    """Run every case (or the named subset) under ``dtype``; one record per (case, seed)."""
    tol = TOLERANCE[dtype]
    out = []
    with T.precision(dtype):
        for case in CASES:
            if cases and case.name not in cases:
                continue
            for s in seeds:
                err = run_case(case, s)
                out.append({"op": case.name, "seed": s, "dtype": dtype, "rel_err": err, "tol": tol,
                            "ok": bool(err <= tol)})
    return out
