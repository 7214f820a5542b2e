import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p1gibbs.geometry import (Divisor, fs_orthonormal_basis, klt_measure, monomial_basis, triangle_divisor)
from p1gibbs.partition import (FanoGeometry, LctBracket, PartitionResult, asymptotic_free_energy_check,
                               collision_verdict, combine_verdicts, gibbs_variational_check, height_invariant,
                               l2_cusp_functional, lct_estimate, log_det_divided, ratio_verdict,
                               strong_gibbs_check, vanishing_order_fit, z_exact, z_mc)
from p1gibbs.sampler import GibbsModel


def test_andreief_closed_form():
    # alpha = 1 with an orthonormal basis: Z = N!
    assert abs(z_exact(2, 1, 1.0, fs_orthonormal_basis(1)).value - 2.0) < 1e-10
    assert abs(z_exact(3, 2, 2.0, fs_orthonormal_basis(2)).value - 6.0) < 1e-4


def test_beta_zero_is_mass_power():
    mu0 = klt_measure(triangle_divisor())
    r = z_exact(2, 1, 0.0, fs_orthonormal_basis(1), mu0=mu0)
    assert r.value == pytest.approx(mu0.total_mass() ** 2, rel=1e-12)


def test_fs_frozen_value():
    # regression pin: k = 2, N = 3, beta = 1
    r = z_exact(3, 2, 1.0, fs_orthonormal_basis(2))
    assert r.verdict == "finite"
    assert abs(r.value - 2.1241663286675943) < 1e-6


def test_mc_agrees_with_exact():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = z_mc(2, 1, 1.0, fs_orthonormal_basis(1), n_samples=100000, seed=5)
    assert abs(r.value - 2.0) < 4 * r.stderr


@settings(max_examples=5)
@given(st.floats(-1.0, 1.0))
def test_constant_tilt_identity(c):
    b = fs_orthonormal_basis(1)
    z0 = z_exact(2, 1, 1.0, b).value
    zc = z_exact(2, 1, 1.0, b, u=lambda x: c + 0 * x[:, 0]).value
    assert zc == pytest.approx(math.exp(-2 * c) * z0, rel=1e-10)


@settings(max_examples=5)
@given(st.integers(0, 10 ** 6))
def test_basis_change_scales_Z(seed):
    r = np.random.default_rng(seed)
    C = r.normal(size=(2, 2)) + 1j * r.normal(size=(2, 2))
    b = fs_orthonormal_basis(1)
    z0 = z_exact(2, 1, 1.0, b).value
    z1 = z_exact(2, 1, 1.0, b.transformed(C)).value
    assert z1 == pytest.approx(abs(np.linalg.det(C)) ** 2 * z0, rel=1e-9)


@given(st.integers(1, 7), st.integers(0, 10 ** 6))
def test_divided_differences_match_direct(d, seed):
    r = np.random.default_rng(seed)
    b = monomial_basis(d)
    z = 0.8 * (r.random((1, d + 1)) + 1j * r.random((1, d + 1)))
    V = np.vander(z[0], d + 1, increasing=True) @ b.coeffs.T
    assert abs(log_det_divided(b, z)[0] - np.log(abs(np.linalg.det(V)))) < 1e-8


def test_ratio_verdict_rules():
    assert ratio_verdict([1.0, 2.0, 4.0, 8.0, 16.0]) == "DIVERGENT"
    assert ratio_verdict([1.0, 1.5, 1.6, 1.601]) == "finite"
    assert ratio_verdict([1.0, 1.2, 1.4, 1.6]) == "inconclusive"


def test_combine_verdicts_table():
    above, below, straddle = LctBracket(1.2, 1.3, []), LctBracket(0.6, 0.7, []), LctBracket(0.9, 1.1, [])
    assert combine_verdicts("finite", above) == "stable"
    assert combine_verdicts("DIVERGENT", below) == "unstable"
    assert combine_verdicts("finite", below) == "inconclusive"
    assert combine_verdicts("inconclusive", straddle) == "inconclusive"
    assert combine_verdicts("inconclusive", below) == "unstable"


def test_vanishing_orders():
    b = fs_orthonormal_basis(4)
    for m in range(2, 6):
        nu, half = vanishing_order_fit(b, m)
        assert abs(nu - m * (m - 1) / 2) < 1e-3 and half < 1e-3


def test_fano_lct_and_divergence():
    geo = FanoGeometry()
    basis, w, mu0 = geo.level(1)
    br = lct_estimate(1, basis)
    assert br.lo < 2 / 3 + 1e-4 < br.hi + 2e-4
    assert collision_verdict(GibbsModel(basis, 1, -1.0, w, mu0))[0] == "DIVERGENT"


def test_divergent_json():
    r = PartitionResult(float("inf"), float("inf"), "DIVERGENT", "shells")
    d = json.loads(r.to_json("abc"))
    assert d["value"] == "DIVERGENT" and d["config_hash"] == "abc"


def test_strong_gibbs_threshold_monotone():
    s = strong_gibbs_check(b_grid=(0.2, 0.8, 0.95), k_range=(1, 2), mc_samples=2000)
    assert s["monotone"]
    assert [r["verdict"] for r in s["rows"]] == ["bounded", "unbounded", "unbounded"]


def test_gibbs_variational_toy():
    assert gibbs_variational_check()["passed"]


def test_height_identity_small_k():
    from p1gibbs.oracle import solve_ma
    from p1gibbs.geometry import WeightSpec
    from p1gibbs.quadrature import SphereGrid
    mu0 = klt_measure(triangle_divisor())
    pf = solve_ma(1.0, mu0, WeightSpec(1), 1, SphereGrid(32))
    r = height_invariant(1, None, pf, mu0)
    assert r["identity_error"] < 1e-8


def test_cusp_functional_gap_shrinks():
    D = Divisor.from_z([0.0], [1.0])
    gaps = [l2_cusp_functional(k, None, 1.0, D)["gap"] for k in (1, 2, 3)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_free_energy_check_shape():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = asymptotic_free_energy_check([2, 4], 1.0, n_samples=20000)
    assert r["oracle"] == 0.0 and r["decreasing"]
