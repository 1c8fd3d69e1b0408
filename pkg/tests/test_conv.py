import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_conv_matrix, gaussian_weights_oracle
from surrogate_da.conv import (
    SMOOTHING_KERNEL,
    GaussianKernel,
    build_kernel,
    convolve,
    convolve_adjoint,
    convolve_adjoint_array,
    convolve_array,
    smooth,
)
from surrogate_da.errors import ParameterError
from surrogate_da.grid import GridGeometry, GridState

BACKENDS = ["numba", "numpy"]


def _state(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return GridState(GridGeometry(*x.shape), x)


class TestBuildKernel:
    def test_k1(self):
        for s2 in (0.1, 8.0, math.inf):
            assert build_kernel(1, s2).weights.tolist() == [[1.0]]

    def test_k3_centre_weight(self):
        # nine-term hand evaluation: 1 / (1 + 4 e^{-1/16} + 4 e^{-1/8})
        w = build_kernel(3, 8.0).weights
        assert w[1, 1] == pytest.approx(0.12066161376465413, rel=1e-14)
        assert w[0, 1] / w[1, 1] == pytest.approx(math.exp(-1 / 16), rel=1e-14)

    def test_k4_paper_kernel(self):
        w = SMOOTHING_KERNEL.weights
        assert SMOOTHING_KERNEL.k == 4 and SMOOTHING_KERNEL.sigma2 == 8.0
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.unravel_index(np.argmax(w), w.shape) == (2, 2)
        assert w[2, 2] == pytest.approx(0.07474827805443343, rel=1e-14)

    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 8, 10, 18, 20])
    @pytest.mark.parametrize("s2", [0.5, 1.0, 8.0, 100.0])
    def test_matches_oracle(self, k, s2):
        w = build_kernel(k, s2).weights
        assert np.allclose(w, gaussian_weights_oracle(k, s2), rtol=1e-13, atol=0)
        assert (w > 0).all()
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_box(self):
        w = build_kernel(3, math.inf).weights
        assert np.allclose(w, 1.0 / 9.0, rtol=1e-15)

    @pytest.mark.parametrize("k,s2", [(0, 1.0), (-1, 1.0), (2.5, 1.0), (3, 0.0), (3, -1.0)])
    def test_bad_parameters(self, k, s2):
        with pytest.raises(ParameterError):
            build_kernel(k, s2)

    def test_kernel_validation(self):
        with pytest.raises(ParameterError):
            GaussianKernel(2, 1.0, np.full((2, 2), 0.3))
        with pytest.raises(ParameterError):
            GaussianKernel(2, 1.0, np.array([[0.5, 0.5], [0.0, 0.0]]))


class TestConvolve:
    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("periodic", [False, True])
    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
    @pytest.mark.parametrize("shape", [(1, 1), (1, 7), (5, 1), (6, 6), (3, 9), (12, 12)])
    def test_equals_dense(self, backend, periodic, k, shape, rng):
        w = build_kernel(k, 2.0).weights
        x = rng.standard_normal((2, *shape))
        B = dense_conv_matrix(*shape, w, periodic)
        got = convolve_array(x, w, periodic, backend)
        want = np.stack([(B @ x[f].ravel()).reshape(shape) for f in range(2)])
        assert np.allclose(got, want, rtol=0, atol=1e-12)

    def test_appendix_1d_padding(self, rng):
        # length-5 signal along longitude, length-3 equal weights; one latitude
        # row so replication in latitude triples every tap
        x = rng.standard_normal(5)
        w = build_kernel(3, math.inf).weights
        out = convolve_array(x[None, None, :], w)[0, 0]
        assert out[0] == pytest.approx((2 * x[0] + x[1]) / 3, abs=1e-15)
        assert out[2] == pytest.approx((x[1] + x[2] + x[3]) / 3, abs=1e-15)
        assert out[4] == pytest.approx((x[3] + 2 * x[4]) / 3, abs=1e-15)

    @pytest.mark.parametrize("k", [1, 2, 4, 7])
    def test_constant_preserved(self, k):
        s = GridState.full(GridGeometry(2, 9, 11), 3.25)
        for periodic in (False, True):
            assert np.allclose(convolve(s, build_kernel(k, 8.0), periodic).values, 3.25, rtol=0, atol=1e-14)

    def test_k1_identity(self, rng):
        s = _state(rng.standard_normal((4, 6)))
        assert np.array_equal(convolve(s, build_kernel(1, 1.0)).values, s.values)
        assert np.array_equal(convolve_adjoint(s, build_kernel(1, 1.0)).values, s.values)

    def test_backends_agree_on_large_grid(self, rng):
        x = rng.standard_normal((3, 90, 180))
        for k in (2, 4, 8):
            w = build_kernel(k, 8.0).weights
            for periodic in (False, True):
                a = convolve_array(x, w, periodic, "numba")
                b = convolve_array(x, w, periodic, "numpy")
                assert np.allclose(a, b, rtol=0, atol=1e-13)
                a = convolve_adjoint_array(x, w, periodic, "numba")
                b = convolve_adjoint_array(x, w, periodic, "numpy")
                assert np.allclose(a, b, rtol=0, atol=1e-13)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
    def test_max_norm_nonincreasing(self, k, nlat, nlon, seed):
        x = np.random.default_rng(seed).standard_normal((1, nlat, nlon))
        y = convolve_array(x, build_kernel(k, 3.0).weights)
        assert np.abs(y).max() <= np.abs(x).max() * (1 + 1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_interior_mean_preserved(self, k, seed):
        x = np.zeros((1, 20, 20))
        x[0, 8:12, 8:12] = np.random.default_rng(seed).standard_normal((4, 4))
        y = convolve_array(x, build_kernel(k, 2.0).weights)
        assert abs(y.mean() - x.mean()) <= 1e-10


class TestAdjoint:
    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("periodic", [False, True])
    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
    @pytest.mark.parametrize("shape", [(1, 1), (2, 5), (6, 6), (7, 3), (10, 10)])
    def test_equals_dense_transpose(self, backend, periodic, k, shape, rng):
        w = build_kernel(k, 8.0).weights
        v = rng.standard_normal((1, *shape))
        B = dense_conv_matrix(*shape, w, periodic)
        got = convolve_adjoint_array(v, w, periodic, backend)[0]
        assert np.allclose(got.ravel(), B.T @ v.ravel(), rtol=0, atol=1e-12)

    def test_inner_product_6x6(self, rng):
        k = SMOOTHING_KERNEL
        u, v = (_state(rng.standard_normal((6, 6))) for _ in range(2))
        lhs = np.vdot(convolve(u, k).values, v.values)
        rhs = np.vdot(u.values, convolve_adjoint(v, k).values)
        assert abs(lhs - rhs) <= 1e-12

    def test_constant_input_interior_vs_boundary(self):
        # symmetric odd kernels keep unit column sums; the off-centre k=4 peak does not
        w = SMOOTHING_KERNEL.weights
        v = np.ones((1, 8, 8))
        fwd = convolve_array(v, w)[0]
        adj = convolve_adjoint_array(v, w)[0]
        want = (dense_conv_matrix(8, 8, w).T @ v.ravel()).reshape(8, 8)
        assert np.allclose(adj, want, atol=1e-14)
        assert np.allclose(adj[3:-3, 3:-3], fwd[3:-3, 3:-3], atol=1e-14)
        assert not np.allclose(adj[0], fwd[0])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 16), st.integers(1, 16), st.booleans(), st.integers(0, 2**32 - 1))
    def test_inner_product_identity(self, k, nlat, nlon, periodic, seed):
        r = np.random.default_rng(seed)
        w = build_kernel(k, r.uniform(0.5, 10.0)).weights
        u = r.standard_normal((2, nlat, nlon))
        v = r.standard_normal((2, nlat, nlon))
        lhs = np.vdot(convolve_array(u, w, periodic), v)
        rhs = np.vdot(u, convolve_adjoint_array(v, w, periodic))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestSmooth:
    def test_constant(self):
        s = GridState.full(GridGeometry(1, 10, 10), -2.0)
        assert np.allclose(smooth(s).values, -2.0, rtol=0, atol=1e-14)

    def test_spike_footprint(self):
        x = np.zeros((1, 12, 12))
        x[0, 6, 6] = 1.0
        y = smooth(_state(x)).values[0]
        rows, cols = np.nonzero(y)
        # output (i, j) reads [i-2, i+1]: a spike at p reaches outputs p-1..p+2
        assert set(rows) == {5, 6, 7, 8} and set(cols) == {5, 6, 7, 8}
        assert y.sum() == pytest.approx(1.0, abs=1e-14)
        assert y[6, 6] == pytest.approx(SMOOTHING_KERNEL.weights[2, 2])

    def test_divergent_spike_damped(self, rng):
        x = rng.uniform(0.0, 1.0, (1, 16, 16))
        x[0, 8, 8] = 10.0
        y = smooth(_state(x)).values
        wmax = SMOOTHING_KERNEL.weights.max()
        # the spike contributes at most wmax * 10 to any output, the rest averages in [0, 1]
        assert y.max() <= wmax * 10.0 + (1 - wmax) * 1.0 + 1e-12
        assert y.max() < x.max()
