import numpy as np
import pytest
from hypothesis import given, strategies as st

from p1gibbs.errors import NoConvergence
from p1gibbs.geometry import WeightSpec, fs_measure, klt_measure, triangle_divisor
from p1gibbs.oracle import (DensityField, energy, entropy, free_energy, functional_F, ma_masses_on,
                            psh_projection, rhs_masses, solve_ma)
from p1gibbs.quadrature import SphereGrid


@pytest.fixture(scope="module")
def triangle():
    mu0 = klt_measure(triangle_divisor())
    pf = solve_ma(1.0, mu0, WeightSpec(1), 1, SphereGrid(32))
    return mu0, pf


def test_fs_fixed_point():
    pf = solve_ma(1.0, fs_measure(), WeightSpec(1), 1, SphereGrid(32))
    assert np.abs(pf.values).max() < 1e-10 and pf.residual < 1e-10


def test_triangle_frozen_values(triangle):
    # regression pins for the klt triangle pair (c = 3/4) on the m = 32 grid
    mu0, pf = triangle
    assert abs(pf.values.min() - (-3.0537613060032176)) < 1e-6
    mu = DensityField(pf.grid, pf.ma_masses() / pf.ma_masses().sum())
    assert abs(free_energy(mu, mu0, 1.0) - (-2.6657770027747643)) < 1e-6


def test_triangle_solves_equation(triangle):
    mu0, pf = triangle
    rhs = rhs_masses(pf, mu0)
    assert np.abs(pf.ma_masses() - rhs / rhs.sum()).max() < 1e-9
    assert pf.is_psh()


def test_ma_density_piles_up_at_divisor(triangle):
    mu0, pf = triangle
    eq = SphereGrid(16, "equal_area")
    m = ma_masses_on(pf, mu0, eq)
    near = eq.locate(triangle_divisor().xyz)
    assert np.all(m[near] > 3 * np.median(m))


def test_minimiser_beats_uniform(triangle):
    mu0, pf = triangle
    mu = DensityField(pf.grid, pf.ma_masses() / pf.ma_masses().sum())
    assert free_energy(mu, mu0, 1.0) < free_energy(DensityField.uniform(pf.grid), mu0, 1.0)


def test_energy_uniform_zero_and_positive():
    g = SphereGrid(24)
    assert abs(energy(DensityField.uniform(g))) < 1e-12
    dens = 1 + 0.5 * g.centers[:, 2]
    assert energy(DensityField(g, dens * g.areas)) > 0


def test_entropy_zero_at_reference():
    g = SphereGrid(16)
    assert abs(entropy(DensityField.uniform(g), fs_measure())) < 1e-10


def test_max_iter_raises():
    with pytest.raises(NoConvergence) as exc:
        solve_ma(1.0, klt_measure(triangle_divisor()), WeightSpec(1), 1, SphereGrid(16), tol=1e-30, max_iter=1)
    assert exc.value.trace


def _random_field(seed, g):
    r = np.random.default_rng(seed)
    c = r.normal(size=(4, 3))
    a = r.normal(size=4)
    return 2 * (np.sin(g.centers @ c.T) * a).sum(1)


@given(st.integers(0, 10 ** 6))
def test_projection_below_and_idempotent(seed):
    g = SphereGrid(12)
    u = _random_field(seed, g)
    P = psh_projection(u, g)
    assert np.all(P.values <= u + 1e-10)
    assert P.is_psh(1e-9)
    assert np.abs(psh_projection(P.values, g).values - P.values).max() < 1e-9


@given(st.integers(0, 10 ** 6), st.floats(-3, 3))
def test_F_translation(seed, c):
    # F(u + c) = F(u) + c since the MA measure has mass one
    g = SphereGrid(12)
    u = _random_field(seed, g)
    assert abs(functional_F(u + c, g) - functional_F(u, g) - c) < 1e-8


@given(st.integers(0, 10 ** 6))
def test_F_monotone(seed):
    g = SphereGrid(12)
    u = _random_field(seed, g)
    v = np.abs(_random_field(seed + 1, g))
    assert functional_F(u + v, g) >= functional_F(u, g) - 1e-10
