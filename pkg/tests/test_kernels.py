import os
import subprocess
import sys

import numpy as np
import pytest

from mmsformer.tensor import _kernels_py as py
from mmsformer.tensor import kernels

try:
    from mmsformer.tensor import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if cy is not None and os.environ.get("MMSFORMER_KERNELS", "") != "python":
        assert kernels.BACKEND == "cython"


def test_env_var_forces_python_backend():
    code = "from mmsformer.tensor import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "MMSFORMER_KERNELS": "python"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (7, 4, 3), (3, 2, 1), (5, 1, 2)])
def test_im2col_col2im_agree(dtype, k, stride, pad, rng):
    x = rng.normal(size=(3, 13, 11)).astype(dtype)
    a, b = py.im2col(x, k, stride, pad), cy.im2col(x, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    np.testing.assert_allclose(py.col2im(cols, 3, 13, 11, k, stride, pad),
                               cy.col2im(cols, 3, 13, 11, k, stride, pad), rtol=1e-5, atol=1e-5)


@needs_ext
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-5), (np.float64, 1e-12)])
@pytest.mark.parametrize("k", [3, 5, 7, 11])
def test_depthwise_agree(dtype, tol, k, rng):
    pad = (k - 1) // 2
    x = rng.normal(size=(4, 10, 9)).astype(dtype)
    w = rng.normal(size=(4, k, k)).astype(dtype)
    np.testing.assert_allclose(py.dwconv_forward(x, w, 1, pad), cy.dwconv_forward(x, w, 1, pad), rtol=tol, atol=tol)
    gy = rng.normal(size=(4, 10, 9)).astype(dtype)
    for a, b in zip(py.dwconv_backward(gy, x, w, 1, pad), cy.dwconv_backward(gy, x, w, 1, pad)):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol * 10)


@needs_ext
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-6), (np.float64, 1e-13)])
@pytest.mark.parametrize("shape,out", [((2, 4, 4), (16, 16)), ((3, 1, 5), (7, 11)), ((1, 3, 2), (3, 2))])
def test_upsample_agree(dtype, tol, shape, out, rng):
    x = rng.normal(size=shape).astype(dtype)
    np.testing.assert_allclose(py.upsample_forward(x, *out), cy.upsample_forward(x, *out), rtol=tol, atol=tol)
    g = rng.normal(size=(shape[0], *out)).astype(dtype)
    np.testing.assert_allclose(py.upsample_backward(g, *shape[1:]), cy.upsample_backward(g, *shape[1:]),
                               rtol=tol, atol=tol * 10)


def test_interp_matrix_rows_sum_to_one():
    m = py.interp_matrix(5, 17, np.float64)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
