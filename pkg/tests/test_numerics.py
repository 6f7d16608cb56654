import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xedit.errors import NumericalError, ShapeError
from xedit.numerics import as_matrix, matmul, solve_spd, sym_eig


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_matches_triple_loop(rng):
    for shape in [(1, 1, 1), (3, 5, 2), (7, 4, 6)]:
        a = rng.normal(size=shape[:2])
        b = rng.normal(size=shape[1:])
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"2x3.*2x3"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_nonfinite_and_wrong_rank():
    with pytest.raises(NumericalError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))


def test_sym_eig_small_known():
    res = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(res.eigenvalues, [1.0, 3.0], atol=1e-12)
    v = res.eigenvectors
    np.testing.assert_allclose(np.abs(v), np.full((2, 2), 1 / np.sqrt(2)), atol=1e-12)


def test_sym_eig_diagonal_and_1x1():
    res = sym_eig(np.diag([3.0, -1.0, 2.0]))
    np.testing.assert_allclose(res.eigenvalues, [-1.0, 2.0, 3.0])
    assert sym_eig(np.array([[5.0]])).eigenvalues.tolist() == [5.0]


@pytest.mark.parametrize("n", [2, 5, 16, 33])
def test_sym_eig_reconstructs_and_matches_lapack(rng, n):
    a = rng.normal(size=(n, n))
    s = a + a.T
    res = sym_eig(s)
    v, w = res.eigenvectors, res.eigenvalues
    assert np.all(np.diff(w) >= 0)
    np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-10)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, s, atol=1e-9 * np.linalg.norm(s))
    np.testing.assert_allclose(w, np.linalg.eigvalsh(s), atol=1e-9 * np.linalg.norm(s))


def test_sym_eig_rank_deficient_psd(rng):
    k = rng.normal(size=(20, 4))
    res = sym_eig(k @ k.T)
    assert np.sum(res.eigenvalues > 1e-8) == 4
    assert np.all(res.eigenvalues > -1e-9)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ShapeError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sym_eig_reports_nonconvergence(rng):
    a = rng.normal(size=(12, 12))
    with pytest.raises(NumericalError, match="sweep"):
        sym_eig(a + a.T, max_sweeps=1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-10, 10, allow_nan=False, allow_infinity=False)))
def test_sym_eig_property_reconstruction(x):
    s = x @ x.T
    res = sym_eig(s)
    scale = max(1.0, np.linalg.norm(s))
    np.testing.assert_allclose(res.eigenvectors @ np.diag(res.eigenvalues) @ res.eigenvectors.T, s,
                               atol=1e-9 * scale)


def test_solve_spd_residual(rng):
    a = rng.normal(size=(8, 8))
    a = a @ a.T + 8 * np.eye(8)
    b = rng.normal(size=(8, 3))
    x = solve_spd(a, b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-10
    xv = solve_spd(a, b[:, 0])
    assert xv.shape == (8,)


def test_solve_spd_accepts_nonsymmetric_well_conditioned(rng):
    a = np.eye(5) + 0.1 * rng.normal(size=(5, 5))
    b = rng.normal(size=(5, 2))
    np.testing.assert_allclose(a @ solve_spd(a, b), b, atol=1e-12)


def test_solve_spd_guards_conditioning():
    with pytest.raises(NumericalError):
        solve_spd(np.diag([1.0, 1e-14]), np.ones(2))
    with pytest.raises(ShapeError):
        solve_spd(np.eye(3), np.ones(2))
