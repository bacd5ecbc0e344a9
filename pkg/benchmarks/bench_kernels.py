"""Time the compiled kernels against the numpy fallback on model-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]

Also times one training step of the desk-scale model under each backend
(the backend is fixed at import, so that part runs in subprocesses).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmsformer.tensor import _kernels_py

try:
    from mmsformer.tensor import _kernels
except ImportError:
    _kernels = None

STEP = """
import time, numpy as np
from mmsformer.config import ModelConfig, DecoderConfig, FusionConfig
from mmsformer.model import build
from mmsformer.tensor import Tensor
from mmsformer.training import cross_entropy
m = build(ModelConfig(num_modalities=2, fusion=FusionConfig(se_reduction=4), decoder=DecoderConfig(32, 2)))
r = np.random.default_rng(0)
x = [Tensor(r.normal(size=(3, 64, 64))) for _ in range(2)]
y = r.integers(0, 2, size=(64, 64))
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    m.zero_grad(); cross_entropy(m(x), y).backward()
    best = min(best, time.perf_counter() - t)
print(best)
"""


def cases(dtype):
    r = np.random.default_rng(0)
    x = r.normal(size=(8, 64, 64)).astype(dtype)      # stage-1 map at 256 px input
    dw7 = r.normal(size=(32, 1, 7, 7)).astype(dtype)
    xs = r.normal(size=(32, 16, 16)).astype(dtype)
    small = r.normal(size=(32, 8, 8)).astype(dtype)
    img = r.normal(size=(3, 64, 64)).astype(dtype)
    return {
        "im2col 3x64x64 k7 s4": (lambda k: k.im2col(img, 7, 4, 3)),
        "col2im 3x64x64 k7 s4": (lambda k, c=_kernels_py.im2col(img, 7, 4, 3): k.col2im(c, 3, 64, 64, 7, 4, 3)),
        "dwconv fwd 32x16x16 k7": (lambda k: k.dwconv_forward(xs, dw7.reshape(32, 7, 7), 1, 3)),
        "dwconv bwd 32x16x16 k7": (lambda k: k.dwconv_backward(xs, xs, dw7.reshape(32, 7, 7), 1, 3)),
        "upsample fwd 32x8x8->64x64": (lambda k: k.upsample_forward(small, 64, 64)),
        "upsample bwd 64x64->32x8x8": (lambda k, g=r.normal(size=(32, 64, 64)).astype(dtype):
                                       k.upsample_backward(g, 8, 8)),
        "im2col 8x64x64 k3 s1": (lambda k: k.im2col(x, 3, 1, 1)),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step(backend, repeat):
    env = {**os.environ, "MMSFORMER_KERNELS": backend}
    out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training step timing")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; only the numpy fallback is available", file=sys.stderr)
        return 1
    print(f"{'kernel':30s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.dtype(args.dtype)).items():
        a = best_of(lambda: fn(_kernels_py), args.repeat) * 1e3
        b = best_of(lambda: fn(_kernels), args.repeat) * 1e3
        got, ref = fn(_kernels), fn(_kernels_py)
        for g, w in zip(*(v if isinstance(v, tuple) else (v,) for v in (got, ref))):
            np.testing.assert_allclose(np.asarray(g), w, rtol=1e-4, atol=1e-4)
        print(f"{name:30s} {a:10.3f} {b:10.3f} {a / b:7.1f}x")
    if not args.no_step:
        reps = max(1, args.repeat // 5)
        a, b = train_step("python", reps) * 1e3, train_step("cython", reps) * 1e3
        print(f"{'train step (2 modalities, 64px)':30s} {a:10.1f} {b:10.1f} {a / b:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
