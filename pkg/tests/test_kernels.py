"""The compiled and pure-Python kernel backends must agree."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2xfuse import kernels

BACKENDS = kernels.available_backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in BACKENDS


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.im2col(np.zeros((1, 3, 3)), 1, 1, 3, 3, backend="fortran")


@needs_both
@given(st.integers(1, 3), st.integers(2, 7), st.integers(2, 7), st.integers(1, 6), st.integers(0, 2**31))
def test_bilinear_backends_agree(C, H, W, n, seed):
    r = np.random.default_rng(seed)
    src = r.normal(size=(C, H, W))
    px = r.uniform(-2, W + 1, size=(n, 3))
    py = r.uniform(-2, H + 1, size=(n, 3))
    g = r.normal(size=(C, n, 3))
    a = kernels.bilinear_forward(src, px, py, backend="cython")
    b = kernels.bilinear_forward(src, px, py, backend="python")
    np.testing.assert_allclose(a, b, atol=1e-12)
    for ga, gb in zip(kernels.bilinear_backward(src, px, py, g, backend="cython"),
                      kernels.bilinear_backward(src, px, py, g, backend="python")):
        np.testing.assert_allclose(ga, gb, atol=1e-12)


@needs_both
@given(st.integers(0, 2**31))
def test_iou_backends_agree(seed):
    r = np.random.default_rng(seed)
    def boxes(n):
        return np.column_stack([r.uniform(-3, 3, (n, 2)), r.uniform(0.3, 4, (n, 2)), r.uniform(-4, 4, n)])
    a, b = boxes(5), boxes(4)
    np.testing.assert_allclose(kernels.rotated_iou_matrix(a, b, backend="cython"),
                               kernels.rotated_iou_matrix(a, b, backend="python"), atol=1e-12)


@needs_both
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3, 5]), st.integers(0, 2**31))
def test_depthwise_backends_agree(C, H, W, k, seed):
    r = np.random.default_rng(seed)
    pad = k // 2
    xp = np.pad(r.normal(size=(C, H, W)), ((0, 0), (pad, pad), (pad, pad)))
    kern = r.normal(size=(C, k, k))
    g = r.normal(size=(C, H, W))
    np.testing.assert_allclose(kernels.depthwise_forward(xp, kern, H, W, backend="cython"),
                               kernels.depthwise_forward(xp, kern, H, W, backend="python"), atol=1e-12)
    for ga, gb in zip(kernels.depthwise_backward(xp, kern, g, backend="cython"),
                      kernels.depthwise_backward(xp, kern, g, backend="python")):
        np.testing.assert_allclose(ga, gb, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@given(st.integers(1, 3), st.integers(3, 8), st.integers(3, 8), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_col2im_is_adjoint_of_im2col(backend, C, Hp, Wp, k, seed):
    r = np.random.default_rng(seed)
    Ho, Wo = Hp - k + 1, Wp - k + 1
    x = r.normal(size=(C, Hp, Wp))
    y = r.normal(size=(C, k, k, Ho, Wo))
    lhs = np.sum(kernels.im2col(x, k, k, Ho, Wo, backend=backend) * y)
    rhs = np.sum(x * kernels.col2im(y, Hp, Wp, backend=backend))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_float32_inputs(backend):
    src = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    out = kernels.bilinear_forward(src, np.array([[1.5]], np.float32), np.array([[1.0]], np.float32),
                                   backend=backend)
    assert out.dtype == np.float32
    assert out[0, 0, 0] == pytest.approx(5.5)
