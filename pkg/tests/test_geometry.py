import numpy as np
import pytest
from hypothesis import given, strategies as st

from p1gibbs.errors import EmptySpace, NotKlt
from p1gibbs.geometry import (BackgroundMeasure, Divisor, SpherePoint, WeightSpec, bergman_function,
                              bernstein_markov_distortion, cusp_basis, fs_measure, fs_orthonormal_basis,
                              gram_matrix, klt_measure, log_det_slater, monomial_basis, orthonormal_basis,
                              triangle_divisor, vanishing_order, xyz_from_z, z_from_xyz)
from p1gibbs.quadrature import chordal2

from conftest import unit


def test_chart_roundtrip(rng):
    z = rng.normal(size=50) + 1j * rng.normal(size=50)
    assert np.allclose(z_from_xyz(xyz_from_z(z)), z)


def test_sphere_point_switches_chart():
    p = SpherePoint("north", 10.0)
    assert p.chart == "south" and abs(p.coord - 0.1) < 1e-15
    assert np.allclose(p.xyz, SpherePoint.from_z(10.0).xyz)


def test_divisor_classes():
    D = triangle_divisor()
    assert D.is_klt() and D.is_lc() and not D.is_reduced()
    assert abs(D.degree() - 2.25) < 1e-12
    lc = Divisor.from_z([0.0, 1.0], [1.0, 1.0])
    assert lc.is_lc() and not lc.is_klt() and lc.is_reduced()


def test_fs_basis_is_orthonormal():
    for d in (1, 3, 5):
        G = gram_matrix(fs_orthonormal_basis(d), WeightSpec(d), fs_measure())
        assert np.abs(G - np.eye(d + 1)).max() < 1e-10


def test_orthonormalize_klt_pair():
    mu0 = klt_measure(triangle_divisor())
    b = orthonormal_basis(monomial_basis(3), WeightSpec(3), mu0)
    G = gram_matrix(b, WeightSpec(3), mu0)
    assert np.abs(G - np.eye(4)).max() < 1e-8


def test_klt_mass_finite_and_lc_rejected():
    assert np.isfinite(klt_measure(triangle_divisor()).total_mass())
    with pytest.raises(NotKlt):
        klt_measure(Divisor.from_z([0.0], [1.0]))


def test_cusp_basis_vanishes_and_empty():
    D = Divisor.from_z([0.0, 2.0], [1.0, 1.0])
    b = cusp_basis(4, D)
    assert b.N == 3
    for p in D.xyz:
        assert np.abs(b.eval_rows(p[None])).max() < 1e-12
    with pytest.raises(EmptySpace):
        cusp_basis(1, D)


def test_vanishing_order_of_monomials():
    b = monomial_basis(4)
    north_pole = np.array([0.0, 0.0, 1.0])
    assert [vanishing_order(c, 4, north_pole) for c in b.coeffs] == [0, 1, 2, 3, 4]


def test_log_det_duplicate_is_minus_inf(rng):
    X = unit(rng, 3)
    X[2] = X[0]
    assert log_det_slater(fs_orthonormal_basis(2), X) == -np.inf


def test_two_point_fs_determinant_is_four_s(rng):
    # frozen closed form: ||det||^2 = 4 s for the FS-orthonormal basis of O(1)
    X = unit(rng, 2)
    s = chordal2(X[0:1], X[1:2])[0]
    assert abs(np.exp(log_det_slater(fs_orthonormal_basis(1), X)) - 4 * s) < 1e-12


@given(st.integers(1, 8), st.integers(0, 10 ** 6))
def test_basis_change_shifts_log_det_by_constant(d, seed):
    r = np.random.default_rng(seed)
    b = fs_orthonormal_basis(d)
    C = r.normal(size=(d + 1, d + 1)) + 1j * r.normal(size=(d + 1, d + 1))
    X = unit(r, d + 1)
    diff = log_det_slater(b.transformed(C), X) - log_det_slater(b, X)
    assert abs(diff - np.log(abs(np.linalg.det(C)) ** 2)) < 1e-8 * max(1, abs(diff))


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_log_det_rotation_invariant(d, seed):
    # the FS data are SU(2)-invariant
    r = np.random.default_rng(seed)
    X = unit(r, d + 1)
    Q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    Q *= np.sign(np.linalg.det(Q))
    b = fs_orthonormal_basis(d)
    assert abs(log_det_slater(b, X) - log_det_slater(b, X @ Q.T)) < 1e-8


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_log_det_symmetric_under_permutation(d, seed):
    r = np.random.default_rng(seed)
    X = unit(r, d + 1)
    b = fs_orthonormal_basis(d)
    assert abs(log_det_slater(b, X) - log_det_slater(b, X[r.permutation(d + 1)])) < 1e-10


def test_bergman_function_fs_is_constant(rng):
    # sum ||s_i||^2 = N on the sphere for an FS-orthonormal basis
    vals = bergman_function(fs_orthonormal_basis(5), WeightSpec(5), unit(rng, 40))
    assert np.allclose(vals, 6.0)


def test_bernstein_markov_subexponential():
    D = Divisor.from_z([0.0], [1.0])
    rates = [np.log(bernstein_markov_distortion(k, D)) / k for k in (1, 2, 4)]
    assert rates[0] > rates[1] > rates[2]
