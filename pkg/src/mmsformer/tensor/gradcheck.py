"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Return the worst relative gradient error of ``f`` with respect to ``x``.

    ``f`` takes no arguments and reads ``x`` by closure, so the same callable can
    check inputs and parameters alike. The error for each coordinate is
    ``|autodiff - central| / max(1, |central|)``. ``max_coords`` samples that many
    coordinates per tensor (without replacement) instead of all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require gradients")
        t.zero_grad()

    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.astype(np.float64).ravel().copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, grad in zip(xs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data.astype(np.float64).sum())
                flat[i] = orig - h
                fm = float(f().data.astype(np.float64).sum())
                flat[i] = orig
                # the perturbation actually applied, after rounding to the storage dtype
                step = (float(flat.dtype.type(orig + h)) - float(flat.dtype.type(orig - h))) / 2
                central = (fp - fm) / (2 * step)
                err = abs(grad[i] - central) / max(1.0, abs(central))
                worst = max(worst, err)
    return worst
