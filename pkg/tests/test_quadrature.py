import numpy as np
from hypothesis import given, strategies as st

from p1gibbs.quadrature import (QuadratureSpec, RadialSingularity, SphereGrid, cell_integrals, chordal2,
                                sphere_integral)


def test_grid_areas_sum_to_one():
    for kind in ("latlon", "equal_area"):
        g = SphereGrid(16, kind)
        assert abs(g.areas.sum() - 1.0) < 1e-13
    assert np.allclose(SphereGrid(8, "equal_area").areas, 1 / 128)


def test_locate_finds_own_centers():
    g = SphereGrid(12, "equal_area")
    assert np.array_equal(g.locate(g.centers), np.arange(g.n))


def test_polynomial_integral():
    # int Zc^2 d(area/4pi) = 1/3
    val = sphere_integral(lambda x: x[:, 2] ** 2)
    assert abs(val - 1 / 3) < 1e-12


def test_integrable_singularity():
    # int s^{-1/2} dω = 2 for the normalised area form (s uniform on [0, 1])
    p = np.array([0.3, 0.4, np.sqrt(0.75)])
    sg = RadialSingularity(p, 0.5, 0.0)
    val = sphere_integral(lambda x: chordal2(x, p) ** -0.5, [sg])
    assert abs(val - 2.0) < 1e-8


@given(st.floats(0.05, 0.9))
def test_power_singularity_closed_form(c):
    # s is uniform on [0, 1] under the normalised area form
    p = np.array([0.0, 0.0, 1.0])
    val = sphere_integral(lambda x: chordal2(x, p) ** -c, [RadialSingularity(p, c, 0.0)])
    assert abs(val - 1 / (1 - c)) < 1e-6 / (1 - c)


def test_cell_integrals_add_up():
    g = SphereGrid(8)
    m = cell_integrals(g, lambda x: 1 + x[:, 0] ** 2)
    assert abs(np.sum(m) - 4 / 3) < 1e-12


def test_laplacian_kills_constants():
    g = SphereGrid(10)
    assert np.abs(g.laplacian() @ np.ones(g.n)).max() < 1e-12
