import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfcista import convops
from lfcista.errors import DegenerateOperatorWarning, DimensionError, InvalidKernelError, InvalidThresholdError

import oracles


def rand(rng, *shape):
    return rng.standard_normal(shape)


def test_corr_identity_kernel():
    x = rand(np.random.default_rng(0), 4, 6)
    np.testing.assert_array_equal(convops.corr2_same(x, [[1.0]]), x)


def test_corr_ones_overlap_counts():
    out = convops.corr2_same(np.ones((3, 3)), np.ones((3, 3)))
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_corr_matches_loop():
    rng = np.random.default_rng(1)
    x, k = rand(rng, 5, 7), rand(rng, 3, 3)
    np.testing.assert_allclose(convops.corr2_same(x, k), oracles.corr_loop(x, k), rtol=0, atol=1e-12)


@pytest.mark.parametrize("kshape", [(1, 3), (3, 1), (5, 3), (3, 7)])
def test_corr_and_conv_rectangular_kernels(kshape):
    rng = np.random.default_rng(2)
    x, k = rand(rng, 6, 9), rand(rng, *kshape)
    np.testing.assert_allclose(convops.corr2_same(x, k), oracles.corr_loop(x, k), atol=1e-12)
    np.testing.assert_allclose(convops.conv2_same(x, k), oracles.conv_loop(x, k), atol=1e-12)


def test_conv_identity_and_symmetric_kernel():
    rng = np.random.default_rng(3)
    x = rand(rng, 6, 5)
    np.testing.assert_array_equal(convops.conv2_same(x, [[1.0]]), x)
    k = rand(rng, 3, 3)
    k = k + k[::-1, ::-1]
    np.testing.assert_allclose(convops.conv2_same(x, k), convops.corr2_same(x, k), atol=1e-12)


def test_conv_matches_flipped_loop():
    rng = np.random.default_rng(4)
    x, k = rand(rng, 7, 5), rand(rng, 3, 5)
    np.testing.assert_allclose(convops.conv2_same(x, k), oracles.conv_loop(x, k), atol=1e-12)


@pytest.mark.parametrize("k", [np.ones((2, 3)), np.ones((3, 4)), np.ones((9, 3))])
def test_bad_kernels_rejected(k):
    with pytest.raises(InvalidKernelError):
        convops.corr2_same(np.ones((5, 5)), k)


def test_non_matrix_rejected():
    with pytest.raises(DimensionError):
        convops.corr2_same(np.ones(5), np.ones((1, 1)))


def test_dict_forward_delta_atom():
    z = rand(np.random.default_rng(5), 1, 4, 6)
    np.testing.assert_array_equal(convops.dict_forward(z, np.ones((1, 1, 1))), z[0])


def test_dict_forward_linearity():
    rng = np.random.default_rng(6)
    d = rand(rng, 3, 3, 5)
    z1, z2 = rand(rng, 3, 6, 8), rand(rng, 3, 6, 8)
    a, b = rng.standard_normal(2)
    lhs = convops.dict_forward(a * z1 + b * z2, d)
    rhs = a * convops.dict_forward(z1, d) + b * convops.dict_forward(z2, d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_dict_forward_and_adjoint_match_dense_matrix():
    rng = np.random.default_rng(7)
    d = rand(rng, 3, 3, 3)
    z, y = rand(rng, 3, 5, 8), rand(rng, 5, 8)
    a = oracles.synthesis_matrix(d, 5, 8)
    np.testing.assert_allclose(convops.dict_forward(z, d).ravel(), a @ z.ravel(), atol=1e-10)
    np.testing.assert_allclose(convops.dict_adjoint(y, d).ravel(), a.T @ y.ravel(), atol=1e-10)


def test_dict_adjoint_delta_atom():
    y = rand(np.random.default_rng(8), 4, 5)
    np.testing.assert_array_equal(convops.dict_adjoint(y, np.ones((1, 1, 1)))[0], y)


def test_depthwise_identity_and_separation():
    rng = np.random.default_rng(9)
    z = rand(rng, 3, 5, 6)
    np.testing.assert_array_equal(convops.depthwise_corr(z, np.ones((3, 1, 1))), z)
    s = rand(rng, 3, 3, 3)
    base = convops.depthwise_corr(z, s)
    s2 = s.copy()
    s2[1] += rand(rng, 3, 3)
    out = convops.depthwise_corr(z, s2)
    np.testing.assert_array_equal(out[[0, 2]], base[[0, 2]])
    assert not np.allclose(out[1], base[1])


def test_depthwise_matches_loop_and_dense():
    rng = np.random.default_rng(10)
    z, s = rand(rng, 2, 5, 7), rand(rng, 2, 3, 5)
    expect = np.stack([oracles.corr_loop(z[m], s[m]) for m in range(2)])
    np.testing.assert_allclose(convops.depthwise_corr(z, s), expect, atol=1e-12)
    mat = oracles.depthwise_corr_matrix(s, 5, 7)
    y = rand(rng, 2, 5, 7)
    np.testing.assert_allclose(convops.depthwise_corr(z, s).ravel(), mat @ z.ravel(), atol=1e-10)
    np.testing.assert_allclose(convops.depthwise_conv(y, s).ravel(), mat.T @ y.ravel(), atol=1e-10)


def test_gram_apply_matches_dense():
    rng = np.random.default_rng(11)
    d, z = rand(rng, 2, 3, 3), rand(rng, 2, 4, 6)
    a = oracles.synthesis_matrix(d, 4, 6)
    np.testing.assert_allclose(convops.gram_apply(z, d).ravel(), a.T @ a @ z.ravel(), atol=1e-10)


def test_lipschitz_trivial_operators():
    assert convops.estimate_lipschitz(np.ones((1, 1, 1)), (4, 5)) == pytest.approx(1.0, rel=1e-6)
    assert convops.estimate_lipschitz(np.full((1, 1, 1), -3.0), (4, 5)) == pytest.approx(9.0, rel=1e-6)


def test_lipschitz_matches_dense_eigenvalue():
    rng = np.random.default_rng(12)
    d = rand(rng, 3, 3, 3)
    a = oracles.synthesis_matrix(d, 5, 8)
    top = np.linalg.eigvalsh(a.T @ a)[-1]
    est = convops.estimate_lipschitz(d, (5, 8), tol=1e-10, max_iters=5000)
    assert est == pytest.approx(top, rel=1e-6)


def test_lipschitz_bounds_gram_norm():
    rng = np.random.default_rng(13)
    d = rand(rng, 3, 3, 5)
    tol = 1e-6
    lip = convops.estimate_lipschitz(d, (6, 9), tol=tol, max_iters=1000)
    for _ in range(100):
        z = rand(rng, 3, 6, 9)
        assert np.linalg.norm(convops.gram_apply(z, d)) <= (lip + tol * lip) * np.linalg.norm(z)


def test_lipschitz_zero_dictionary_warns():
    with pytest.warns(DegenerateOperatorWarning):
        assert convops.estimate_lipschitz(np.zeros((2, 3, 3)), (5, 5)) == 0.0


def test_soft_threshold_values():
    assert convops.soft_threshold(1.2, 0.5) == pytest.approx(0.7)
    assert convops.soft_threshold(-0.3, 0.5) == 0.0
    x = np.linspace(-3, 3, 13)
    np.testing.assert_array_equal(convops.soft_threshold(x, 0.0), x)
    with pytest.raises(InvalidThresholdError):
        convops.soft_threshold(x, -0.1)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(0, 1e3))
def test_soft_threshold_non_expansive(a, b, t):
    assert abs(convops.soft_threshold(a, t) - convops.soft_threshold(b, t)) <= abs(a - b) * (1 + 1e-15)


def test_global_max_pool_cases():
    vals, pos = convops.global_max_pool(np.zeros((3, 4, 5)))
    np.testing.assert_array_equal(vals, 0.0)
    assert pos == [(0, 0)] * 3
    z = np.zeros((2, 4, 5))
    z[1, 2, 3] = 5.0
    z[0, 1, 1] = z[0, 2, 2] = 1.0
    vals, pos = convops.global_max_pool(z)
    assert vals[1] == 5.0 and pos[1] == (2, 3)
    assert pos[0] == (1, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_linearity_of_all_operators(seed):
    rng = np.random.default_rng(seed)
    rows, cols = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    k = rand(rng, 3, 3)
    d = rand(rng, 2, 3, 3)
    a, b = rng.standard_normal(2)
    x1, x2 = rand(rng, rows, cols), rand(rng, rows, cols)
    z1, z2 = rand(rng, 2, rows, cols), rand(rng, 2, rows, cols)
    for op, u, v, arg in [(convops.corr2_same, x1, x2, k), (convops.conv2_same, x1, x2, k),
                          (convops.dict_forward, z1, z2, d), (convops.depthwise_corr, z1, z2, d)]:
        np.testing.assert_allclose(op(a * u + b * v, arg), a * op(u, arg) + b * op(v, arg),
                                   atol=1e-10)


def test_adjoint_identity_many_shapes():
    rng = np.random.default_rng(14)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for _ in range(200):
            m = int(rng.integers(1, 4))
            rows, cols = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            kr = int(rng.choice(np.arange(1, rows + 1, 2)))
            kc = int(rng.choice(np.arange(1, cols + 1, 2)))
            z, y, d = rand(rng, m, rows, cols), rand(rng, rows, cols), rand(rng, m, kr, kc)
            lhs = np.vdot(convops.dict_forward(z, d), y)
            rhs = np.vdot(z, convops.dict_adjoint(y, d))
            assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(y)
