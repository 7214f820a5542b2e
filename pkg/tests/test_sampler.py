import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, strategies as st

from p1gibbs.geometry import (WeightSpec, fs_measure, fs_orthonormal_basis, klt_measure, log_det_slater,
                              triangle_divisor)
from p1gibbs.oracle import mu0_masses
from p1gibbs.quadrature import SphereGrid
from p1gibbs.sampler import (OCTAHEDRON, ChainState, EmpiricalDensity, GibbsModel, PhaseSpec,
                             SamplerConfig, acceptance_probability, det_ratio_update,
                             detailed_balance_exact, estimate_one_point_density, hamiltonian, histogram,
                             mean_energy_product, mean_energy_product_quadrature, mh_step, run_chains,
                             submean_diagnostic, toy_chain, toy_transition_matrix, toy_weights,
                             total_variation, transformed_pair)

from conftest import unit


def _state(d=3, k=3, beta=3.0, seed=0):
    model = GibbsModel(fs_orthonormal_basis(d), k, beta)
    X = unit(np.random.default_rng(seed), d + 1)
    return ChainState(model, X, seed)


def test_phase_spec():
    assert PhaseSpec("scaled", table=((4, 0.0),)).beta_at(4) == 0.0
    with pytest.raises(ValueError):
        PhaseSpec("fixed", 0.0)
    with pytest.raises(ValueError):
        PhaseSpec("scaled", table=((1, -1.0),))


def test_hamiltonian_matches_log_det(rng):
    b = fs_orthonormal_basis(2)
    X = unit(rng, 3)
    assert abs(hamiltonian(X, b, 2) + log_det_slater(b, X) / 2) < 1e-12


def test_det_ratio_matches_direct(rng):
    st_ = _state()
    p = unit(rng, 1)[0]
    lr, Ainv = det_ratio_update(st_, 1, p)
    X = st_.pos.copy()
    X[1] = p
    direct = (log_det_slater(st_.model.basis, X) - log_det_slater(st_.model.basis, st_.pos)) / 2
    assert abs(lr - direct) < 1e-10


def test_identity_proposal_always_accepted():
    st_ = _state()
    assert acceptance_probability(st_, 2, st_.pos[2]) == pytest.approx(1.0, abs=1e-12)


def test_long_run_inverse_stays_accurate(rng):
    st_ = _state(d=6, k=6, beta=6.0)
    for t in range(3000):
        site = t % 7
        q = st_.pos[site] + 0.3 * rng.normal(size=3)
        mh_step(st_, site, q / np.linalg.norm(q))
    assert st_.inverse_error() < 1e-8
    direct = np.linalg.slogdet(st_.A)[1]
    assert abs(direct - st_.logdet) < 1e-8


def test_runs_are_deterministic():
    m = GibbsModel(fs_orthonormal_basis(2), 2, 1.0)
    cfg = SamplerConfig(chains=2, n_keep=200, burn_in=100, thin=2, seed=7)
    a, b = run_chains(m, cfg), run_chains(m, cfg)
    assert np.array_equal(a.positions, b.positions)
    c = run_chains(m, SamplerConfig(chains=2, n_keep=200, burn_in=100, thin=2, seed=8))
    assert not np.array_equal(a.positions, c.positions)


def test_fs_one_point_density_uniform():
    m = GibbsModel(fs_orthonormal_basis(2), 2, 2.0)
    ss = run_chains(m, SamplerConfig(chains=4, n_keep=5000, burn_in=500, thin=4, seed=1))
    d = estimate_one_point_density(ss, 8)
    assert total_variation(d.masses, d.grid.areas) < 0.05
    # exchangeability: every site carries the same marginal
    z = ss.positions[:, :, 2].astype(float)
    assert np.abs(z.mean(axis=0)).max() < 0.05


def test_iid_phase_reproduces_mu0():
    mu0 = klt_measure(triangle_divisor())
    m = GibbsModel(fs_orthonormal_basis(2), 2, 0.0, WeightSpec(2), mu0)
    ss = run_chains(m, SamplerConfig(chains=2, n_keep=20000, seed=3))
    assert ss.diagnostics["chains"][0]["mode"] == "iid"
    d = estimate_one_point_density(ss, 8)
    ref = mu0_masses(d.grid, mu0)
    assert total_variation(d.masses, ref / ref.sum()) < 0.03


def test_toy_detailed_balance_exact():
    W = toy_weights(OCTAHEDRON, 1, 1)
    states, T = toy_transition_matrix(W, 6)
    assert detailed_balance_exact(W, T)
    for s in states:
        assert sum(T[s].values()) == Fraction(1)


def test_toy_chain_matches_gibbs_weights():
    W = toy_weights(OCTAHEDRON, 1, 1)
    Z = sum(W.values())
    exact = np.array([float(W[(i, j)] / Z) for i in range(6) for j in range(6)])
    freq, se = toy_chain(OCTAHEDRON, 1.0, 1, n_steps=400000, seed=2)
    sel = exact > 0
    assert np.all(freq[~sel] == 0)
    assert np.max(np.abs(freq - exact)[sel] / np.maximum(se[sel], 1e-12)) < 5


@given(st.integers(0, 10 ** 6))
def test_transformed_pair_leaves_gibbs_density_unchanged(seed):
    # at beta = 1 shifting the weight by k psi and mu0 by e^psi cancels
    r = np.random.default_rng(seed)
    a = r.normal(size=3)
    psi = lambda x: x @ a
    k = 2
    b = fs_orthonormal_basis(k)
    m1 = GibbsModel(b, k, 1.0, WeightSpec(k), fs_measure())
    w2, mu2 = transformed_pair(WeightSpec(k), fs_measure(), psi, k)
    m2 = GibbsModel(b, k, 1.0, w2, mu2)
    X = np.stack([unit(r, 3), unit(r, 3)])
    d1 = m1.log_density(X)
    d2 = m2.log_density(X)
    assert abs((d1[0] - d1[1]) - (d2[0] - d2[1])) < 1e-10


def test_submean_constant_bounded():
    Cs = [submean_diagnostic(fs_orthonormal_basis(N - 1), N - 1, n_centers=8, n_inner=1000, seed=1)["fitted_C"]
          for N in (2, 4)]
    assert max(Cs) < 1.0


def test_energy_product_mc_vs_quadrature():
    # N = 2: Monte Carlo and cell-pair quadrature agree
    from p1gibbs.oracle import DensityField
    g = SphereGrid(16, "equal_area")
    mu = DensityField(g, (1 + 0.5 * g.centers[:, 2]) * g.areas)
    b = fs_orthonormal_basis(1)
    mc, se = mean_energy_product(mu, b, 1, 200000, seed=4)
    q = mean_energy_product_quadrature(mu, b, 1)
    assert abs(mc - q) < 4 * se + 2e-3


def test_csv_roundtrips(tmp_path):
    m = GibbsModel(fs_orthonormal_basis(1), 1, 1.0)
    ss = run_chains(m, SamplerConfig(n_keep=50, burn_in=10, thin=1))
    ss.to_csv(tmp_path / "s.csv", "config_hash=abc")
    lines = open(tmp_path / "s.csv").read().splitlines()
    assert lines[0] == "# config_hash=abc" and lines[1] == "sweep,site,chart,re,im"
    assert len(lines) == 2 + 100
    d = estimate_one_point_density(ss, 4)
    d.to_csv(tmp_path / "d.csv", "config_hash=abc")
    back = EmpiricalDensity.from_csv(tmp_path / "d.csv")
    assert np.allclose(back.masses, d.masses)


def test_histogram_total():
    h = histogram(unit(np.random.default_rng(0), 1000), 6)
    assert h.total == 1000 and h.counts.sum() == 1000
