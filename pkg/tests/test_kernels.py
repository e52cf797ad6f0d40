import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vocalscreen import _fallback, kernels

ext = pytest.importorskip("vocalscreen._ext", reason="compiled extension not built")


def _rbf(n, d, seed, gamma=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.where(X[:, 0] + 0.3 * rng.normal(size=n) > 0, 1.0, -1.0)
    sq = (X ** 2).sum(1)
    return np.exp(-gamma * (sq[:, None] + sq[None, :] - 2 * X @ X.T)), y


def test_compiled_backend_selected():
    assert kernels.BACKEND == "compiled"


def test_env_var_forces_fallback():
    env = dict(os.environ, VOCALSCREEN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from vocalscreen import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("n,C,seed", [(20, 1.0, 0), (60, 10.0, 1), (80, 0.1, 2), (40, 1e3, 3)])
def test_smo_backends_agree(n, C, seed):
    K, y = _rbf(n, 3, seed)
    a1, r1, it1 = ext.smo_solve(K, y, C)
    a2, r2, it2 = _fallback.smo_solve(K, y, C)
    assert it1 == it2
    np.testing.assert_allclose(a1, a2, rtol=0, atol=1e-12)
    assert r1 == pytest.approx(r2, abs=1e-12)


def test_smo_satisfies_kkt():
    K, y = _rbf(50, 2, 4)
    C = 5.0
    alpha, rho, _ = ext.smo_solve(K, y, C, eps=1e-6)
    assert np.all((alpha >= -1e-12) & (alpha <= C + 1e-12))
    assert abs(alpha @ y) < 1e-9
    f = K @ (alpha * y) - rho
    m = y * f
    free = (alpha > 1e-8) & (alpha < C - 1e-8)
    np.testing.assert_allclose(m[free], 1, atol=1e-4)
    assert np.all(m[alpha < 1e-8] >= 1 - 1e-4)
    assert np.all(m[alpha > C - 1e-8] <= 1 + 1e-4)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 9), st.integers(2, 9),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 1000))
def test_maxpool_backends_agree(N, C, H, W, dtype, seed):
    x = np.random.default_rng(seed).normal(size=(N, C, H, W)).astype(dtype)
    o1, a1 = ext.maxpool2x2_forward(x)
    o2, a2 = _fallback.maxpool2x2_forward(x)
    np.testing.assert_array_equal(np.asarray(o1), o2)
    np.testing.assert_array_equal(np.asarray(a1), a2)
    d = np.random.default_rng(seed + 1).normal(size=o2.shape).astype(dtype)
    np.testing.assert_array_equal(np.asarray(ext.maxpool2x2_backward(d, a2, H, W)),
                                  _fallback.maxpool2x2_backward(d, a2, H, W))


@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 8), st.integers(3, 8),
       st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 1000))
def test_im2col_col2im_backends_agree(N, C, H, W, kh, kw, s, dtype, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(N, C, H, W)).astype(dtype)
    c1 = np.asarray(ext.im2col(x, kh, kw, s))
    c2 = _fallback.im2col(x, kh, kw, s)
    np.testing.assert_array_equal(c1, c2)
    Ho, Wo = (H - kh) // s + 1, (W - kw) // s + 1
    assert c2.shape == (N * Ho * Wo, C * kh * kw)
    d = rng.normal(size=(N, Ho, Wo, C, kh, kw)).astype(dtype)
    np.testing.assert_array_equal(np.asarray(ext.col2im(d, H, W, s)),
                                  _fallback.col2im(d, H, W, s))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    cols = _fallback.im2col(x, 3, 2, 2)
    d = rng.normal(size=cols.shape)
    back = _fallback.col2im(d.reshape(2, 3, 3, 3, 3, 2), 7, 6, 2)
    assert np.sum(cols * d) == pytest.approx(np.sum(x * back))
