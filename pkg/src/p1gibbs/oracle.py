"""Deterministic limit objects on a finite-volume sphere grid.

Normalisations
--------------
omega is the FS probability area form and dd^c u = (Delta_S2 u) omega, with
Delta_S2 the Laplacian of the unit sphere.  For a weight on O(d) at level k
the curvature is theta = (d/k) omega + dd^c(v/k), of mass V = d/k, and the
Monge-Ampere measure MA(u) = (theta + dd^c u) / V is a probability measure.

On the grid, MA masses are a + L(u + b)/V with a the cell areas, L the
finite-volume Laplacian and b = v/k the background potential.  The primitive
of MA vanishing at v_theta = P_theta(0) is

    E(u) = a.(u) + [u.L u / 2 + u.L b] / V  - E_raw(v_theta).

The Green function G(x, y) = log s(x, y) + 1 (s the squared chordal
distance) satisfies dd^c G(., y) = delta_y - omega and has zero omega-mean,
so E_theta(mu) = -(V/2) int int G d(mu - omega)^2 >= 0 with equality at
mu = omega.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NoConvergence, NotKlt
from .geometry import BackgroundMeasure, WeightSpec, as_xyz, fs_measure
from .quadrature import QuadratureSpec, SphereGrid, cell_integrals, chordal2


# ---------------------------------------------------------------- fields

@dataclass
class DensityField:
    """Cell masses of a probability measure on a sphere grid."""
    grid: SphereGrid
    masses: np.ndarray

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)

    @property
    def density(self):
        """Density with respect to omega."""
        return self.masses / self.grid.areas

    @property
    def mass(self):
        return float(self.masses.sum())

    def normalized(self):
        return DensityField(self.grid, self.masses / self.masses.sum())

    @classmethod
    def from_density(cls, grid, rho):
        return cls(grid, np.asarray(rho, dtype=float) * grid.areas)

    @classmethod
    def uniform(cls, grid):
        return cls(grid, grid.areas.copy())


@dataclass
class PotentialField:
    grid: SphereGrid
    values: np.ndarray
    V: float = 1.0
    background: np.ndarray = None
    beta: float = None
    residual: float = None
    tag: str = "theta"
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.background is None:
            self.background = np.zeros(self.grid.n)

    @property
    def eps_grid(self):
        return 10.0 * self.grid.h ** 2

    def curvature_masses(self):
        """Cell masses of theta + dd^c u (total V)."""
        L = self.grid.laplacian()
        return self.V * self.grid.areas + L @ (self.values + self.background)

    def ma_masses(self):
        return self.curvature_masses() / self.V

    def psh_defect(self):
        """Minimum over cells of the density of theta + dd^c u."""
        return float(np.min(self.curvature_masses() / self.grid.areas))

    def is_psh(self, eps=None):
        return self.psh_defect() >= -(self.eps_grid if eps is None else eps)

    def __call__(self, points):
        return self.grid.interpolate(self.values, as_xyz(points))

    def ma_density(self):
        return DensityField(self.grid, self.ma_masses())


# ---------------------------------------------------------------- Green energy

def green_function(x, y):
    """G(x, y) = log chordal^2(x, y) + 1 for x != y."""
    return np.log(chordal2(as_xyz(x), as_xyz(y))) + 1.0


def energy(mu, V=1.0, chunk=1024):
    """Double-quadrature energy E_theta(mu) for theta = V omega."""
    grid = mu.grid
    delta = mu.masses - grid.areas
    X = grid.centers
    a = grid.areas
    tot = 0.0
    for s in range(0, grid.n, chunk):
        sl = slice(s, s + chunk)
        d2 = 0.25 * (np.sum(X[sl] ** 2, 1)[:, None] + np.sum(X ** 2, 1)[None, :]
                     - 2.0 * X[sl] @ X.T)
        idx = np.arange(s, min(s + chunk, grid.n))
        d2[idx - s, idx] = 1.0
        G = np.log(np.maximum(d2, 1e-300)) + 1.0
        # mean of G over pairs inside a cell of area a: log a + 1/2
        G[idx - s, idx] = np.log(a[idx]) + 0.5
        tot += float(delta[sl] @ (G @ delta))
    return -0.5 * V * tot


def _pinned_solve(K, rhs):
    """Solve K x = rhs for the singular grid Laplacian K (kernel = constants),
    rhs with zero sum; returns the mean-zero solution."""
    n = K.shape[0]
    Kp = K[1:, 1:].tocsc()
    x = np.zeros(n)
    x[1:] = spla.spsolve(Kp, rhs[1:])
    return x - x.mean()


def potential_of(mu, V=1.0):
    """phi with MA(phi) = mu on the grid, mean zero."""
    K = -mu.grid.laplacian()
    rhs = V * (mu.grid.areas - mu.masses)
    rhs = rhs - rhs.mean()
    return _pinned_solve(K, rhs)


def energy_from_potential(mu, V=1.0):
    """E(mu) = E(phi_mu) - <phi_mu, mu>, phi_mu the discrete MA potential of mu."""
    phi = potential_of(mu, V)
    a = mu.grid.areas
    L = mu.grid.laplacian()
    return float(a @ phi + phi @ (L @ phi) / (2 * V) - mu.masses @ phi)


# ---------------------------------------------------------------- entropy

def mu0_masses(grid, mu0, extra_log=None, quad=QuadratureSpec()):
    """Cell masses of exp(extra_log) mu0, extra_log continuous."""
    if extra_log is None:
        f = mu0.rho
    else:
        f = lambda x: mu0.rho(x) * np.exp(extra_log(x))

    def g(x):
        v = f(x)
        return np.where(np.isfinite(v), v, 0.0)
    spec = QuadratureSpec(m=grid.m, order=quad.order, max_depth=quad.max_depth, near=quad.near)
    return np.asarray(cell_integrals(grid, g, mu0.radial_singularities(), spec), dtype=float)


def _masses(grid, mu0):
    if isinstance(mu0, BackgroundMeasure):
        return mu0_masses(grid, mu0)
    if isinstance(mu0, DensityField):
        return mu0.masses
    return np.asarray(mu0, dtype=float)


def entropy(mu, mu0):
    """Relative entropy D(mu, mu0) on the grid; mu0 may be non-normalised."""
    m = mu.masses
    m0 = _masses(mu.grid, mu0)
    pos = m > 0
    if np.any(pos & (m0 <= 0)):
        return np.inf
    return float(np.sum(m[pos] * np.log(m[pos] / m0[pos])))


def free_energy(mu, mu0, beta, V=1.0):
    if beta <= 0:
        raise ValueError("free energy needs beta > 0")
    return energy(mu, V) + entropy(mu, mu0) / beta


def free_energy_from_potential(mu, mu0, beta, V=1.0):
    return energy_from_potential(mu, V) + entropy(mu, mu0) / beta


# ---------------------------------------------------------------- MA solver

def _background(grid, w, k):
    if w is None or w.perturbation is None:
        return np.zeros(grid.n)
    return np.asarray(w.perturbation(grid.centers), dtype=float) / k


def solve_ma(beta, mu0=None, w=None, k=1, grid=None, tol=1e-10, max_iter=200,
             init=None, quad=QuadratureSpec(), m0=None):
    """Solve MA(u) = exp(beta u) mu0 on the grid by damped Newton.

    The unknown psi = u + b (b = v/k) maximises the strictly concave
    G(psi) = a.psi + psi.L psi / (2V) - (1/beta) sum exp(beta psi) M0',
    with M0' the cell masses of exp(-beta b) mu0, so Newton with an Armijo
    line search on G is globally convergent; a relaxed Picard step is used
    if the line search stalls.
    """
    if beta <= 0:
        raise ValueError("solve_ma needs beta > 0")
    mu0 = fs_measure() if mu0 is None else mu0
    if mu0.kind == "poincare":
        raise NotKlt("Poincare-type measures are handled by the cusp-form pathway")
    if not mu0.is_finite():
        raise NotKlt("background measure has infinite mass")
    w = WeightSpec(k) if w is None else w
    if w.singular is not None:
        raise NotKlt("log-log weights are handled by the cusp-form pathway")
    if w.degree < 1:
        raise ValueError("degree must be >= 1")
    grid = SphereGrid(64) if grid is None else grid
    V = w.degree / k
    b = _background(grid, w, k)
    if m0 is None:
        if w.perturbation is None:
            m0 = mu0_masses(grid, mu0, quad=quad)
        else:
            pert = w.perturbation
            m0 = mu0_masses(grid, mu0, lambda x: -beta * np.asarray(pert(x)) / k, quad)
    a = grid.areas
    L = grid.laplacian()
    K = (-L).tocsc()

    if init is None:
        psi = np.full(grid.n, -np.log(m0.sum()) / beta)
    else:
        psi = np.asarray(init, dtype=float) + b

    def F_of(psi):
        return a + (L @ psi) / V - np.exp(beta * psi) * m0

    def G_of(psi):
        return a @ psi + psi @ (L @ psi) / (2 * V) - np.exp(beta * psi) @ m0 / beta

    hist = []
    F = F_of(psi)
    res = float(np.abs(F).sum())
    hist.append(res)
    it = 0
    while res > tol:
        if it >= max_iter:
            raise NoConvergence(f"MA solver stopped at residual {res:.3e}", hist)
        it += 1
        D = sp.diags(beta * np.exp(beta * psi) * m0)
        step = spla.spsolve((K / V + D).tocsc(), F)
        g0 = G_of(psi)
        slope = F @ step
        t = 1.0
        while t > 1e-10:
            cand = psi + t * step
            if G_of(cand) >= g0 + 1e-4 * t * slope:
                break
            t *= 0.5
        if t <= 1e-10:
            # relaxed Picard step
            r = np.exp(beta * psi) * m0
            r = r / r.sum()
            target = _pinned_solve(K, V * (a - r))
            target = target - np.log(np.exp(beta * target) @ m0) / beta
            cand = psi + 0.5 * (target - psi)
        psi = cand
        F = F_of(psi)
        newres = float(np.abs(F).sum())
        hist.append(newres)
        if newres >= res and t <= 1e-10 and it > 10:
            raise NoConvergence(f"MA solver stalled at residual {newres:.3e}", hist)
        res = newres
    u = psi - b
    return PotentialField(grid, u, V, b, beta=beta, residual=res, tag="solve_ma", history=hist)


def rhs_masses(pf, mu0, quad=QuadratureSpec()):
    """Cell masses of exp(beta u) mu0 at a solved field."""
    m0 = mu0_masses(pf.grid, mu0, quad=quad)
    return np.exp(pf.beta * pf.values) * m0


# ---------------------------------------------------------------- projection

def _as_values(u, grid):
    if isinstance(u, PotentialField):
        return u.values
    if callable(u):
        return np.asarray(u(grid.centers), dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        return np.full(grid.n, float(u))
    return u


def psh_projection(u, grid=None, V=1.0, background=None, max_iter=500):
    """Largest grid function phi <= u with theta + dd^c phi >= 0 cellwise.

    In xi = phi + b this is the linear complementarity problem
    xi <= g, r = V a - K xi >= 0, r.(g - xi) = 0 (g = u + b), solved by a
    primal-dual active set iteration (finite for the M-matrix K).
    """
    if isinstance(u, PotentialField):
        grid = u.grid if grid is None else grid
        V = u.V
        background = u.background if background is None else background
    values = _as_values(u, grid)
    b = np.zeros(grid.n) if background is None else np.asarray(background, dtype=float)
    K = (-grid.laplacian()).tocsr()
    a = grid.areas
    g = values + b
    f = V * a
    active = np.ones(grid.n, dtype=bool)
    xi = g.copy()
    for it in range(max_iter):
        inact = ~active
        xi = g.copy()
        if inact.any():
            Kii = K[inact][:, inact].tocsc()
            rhs = f[inact] - K[inact][:, active] @ g[active]
            xi[inact] = spla.spsolve(Kii, rhs)
        r = f - K @ xi
        # primal-dual active set update: contact cells keep positive MA
        # mass, free cells that cross the obstacle become contact cells
        tol = 1e-14 * f.max()
        new_active = np.where(active, r > -tol, xi > g + 1e-14 * (1 + np.abs(g)))
        if np.array_equal(new_active, active):
            break
        active = new_active
    else:
        raise NoConvergence("psh projection active set did not settle")
    phi = np.minimum(xi, g) - b
    return PotentialField(grid, phi, V, b, tag="projection")


def functional_F(u, grid=None, V=1.0, background=None, return_ma=False):
    """F(u) = E(P u), anchored so that E(v_theta) = 0."""
    P = psh_projection(u, grid, V, background)
    grid = P.grid
    val = _energy_primitive(P.values, grid, P.V, P.background)
    vt = psh_projection(np.zeros(grid.n), grid, P.V, P.background)
    val -= _energy_primitive(vt.values, grid, P.V, P.background)
    if return_ma:
        return val, P.ma_masses()
    return val


def _energy_primitive(phi, grid, V, b):
    L = grid.laplacian()
    return float(grid.areas @ phi + (phi @ (L @ phi) / 2 + phi @ (L @ b)) / V)


def legendre_energy(mu, family, V=1.0, background=None):
    """max over the family of F(u) - <u, mu>: a lower bound for E(mu)."""
    best = -np.inf
    for u in family:
        vals = _as_values(u, mu.grid)
        val = functional_F(vals, mu.grid, V, background) - float(mu.masses @ vals)
        best = max(best, val)
    return best


def local_exponent(density, grid, point, rmin=None, rmax=0.3):
    """Log-log slope of a cell density against chordal^2 distance to point."""
    s = chordal2(grid.centers, as_xyz(point)[0])
    rmin = (2 * grid.h) ** 2 if rmin is None else rmin
    sel = (s > rmin) & (s < rmax ** 2)
    A = np.stack([np.log(s[sel]), np.ones(sel.sum())], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.log(density[sel]), rcond=None)
    return float(coef[0])


def ma_masses_on(pf, mu0, grid, quad=QuadratureSpec()):
    """Normalised cell masses of exp(beta u) mu0 on another grid, with u
    interpolated from the solved field (used to compare with histograms)."""
    spec = QuadratureSpec(m=grid.m, order=quad.order, max_depth=quad.max_depth, near=quad.near)

    def f(x):
        v = mu0.rho(x) * np.exp(pf.beta * pf.grid.interpolate(pf.values, x))
        return np.where(np.isfinite(v), v, 0.0)
    m = np.asarray(cell_integrals(grid, f, mu0.radial_singularities(), spec), dtype=float)
    return m / m.sum()
