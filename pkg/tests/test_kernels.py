import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serverless_kd.nn import kernels

py = kernels.python_kernels
cy = kernels.compiled_kernels

needs_compiled = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def geometry(h, w, k, s):
    return (h - k) // s + 1, (w - k) // s + 1


shapes = st.tuples(st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 4),
                   st.integers(1, 3), st.integers(1, 3))


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32 - 1))
def test_im2col_col2im_agree(shape, seed):
    n, h, w, c, k, s = shape
    ho, wo = geometry(h, w, k, s)
    x = np.random.default_rng(seed).normal(size=(n, h, w, c))
    a, b = py.im2col(x, k, s, ho, wo), cy.im2col(x, k, s, ho, wo)
    assert np.array_equal(a, b)
    back_py = py.col2im(a, n, h, w, c, k, s, ho, wo)
    back_cy = cy.col2im(np.ascontiguousarray(a), n, h, w, c, k, s, ho, wo)
    assert np.allclose(back_py, back_cy, atol=1e-12)


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32 - 1))
def test_maxpool_agree(shape, seed):
    n, h, w, c, p, s = shape
    p = min(p + 1, h, w)
    ho, wo = geometry(h, w, p, s)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, h, w, c))
    out_py, arg_py = py.maxpool_forward(x, p, s, ho, wo)
    out_cy, arg_cy = cy.maxpool_forward(x, p, s, ho, wo)
    assert np.array_equal(out_py, out_cy)
    assert np.array_equal(arg_py, np.asarray(arg_cy))
    dout = rng.normal(size=out_py.shape)
    assert np.allclose(py.maxpool_backward(dout, arg_py, h, w), cy.maxpool_backward(dout, arg_cy, h, w), atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    # <im2col(x), y> == <x, col2im(y)> for the fallback (and thus both backends)
    rng = np.random.default_rng(0)
    n, h, w, c, k, s = 2, 7, 6, 3, 3, 2
    ho, wo = geometry(h, w, k, s)
    x = rng.normal(size=(n, h, w, c))
    y = rng.normal(size=(n * ho * wo, k * k * c))
    lhs = float((py.im2col(x, k, s, ho, wo) * y).sum())
    rhs = float((x * py.col2im(y, n, h, w, c, k, s, ho, wo)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_env_var_forces_fallback():
    env = dict(os.environ, SERVERLESS_KD_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from serverless_kd.nn import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"
