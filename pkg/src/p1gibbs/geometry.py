"""Riemann sphere, divisors, metric weights on O(d), background measures,
section bases and the log-determinant density.

Conventions
-----------
A point of P^1 is a unit vector P = (X, Y, Zc).  The north chart coordinate
is z = (X + iY) / (1 + Zc), so z = 0 is the north pole; the south chart uses
w = 1/z = (X - iY) / (1 - Zc).  Sections of O(d) are polynomials of degree
<= d in z, stored as coefficient vectors on the monomial frame 1, z, ..., z^d.
In the south chart the same section reads sum_i a_i w^(d-i).

The reference area form ``omega`` is the Fubini-Study form normalised to a
probability measure, and the background weight of O(d) is d log(1 + |z|^2).
"""
from dataclasses import dataclass, field
from math import comb
import json

import numpy as np

from .errors import EmptySpace, DivergentIntegral, NotPositiveDefinite, NotKlt
from .quadrature import (QuadratureSpec, RadialSingularity, chordal2, merge_singularities,
                         sphere_integral)

CHI_OVERLAP = 0.2


# ---------------------------------------------------------------- points

def z_from_xyz(xyz):
    """North chart coordinate (complex inf at the south pole)."""
    xyz = np.asarray(xyz, dtype=float)
    X, Y, Z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (X + 1j * Y) / (1.0 + Z)
    return np.where(1.0 + Z <= 0.0, complex(np.inf, 0.0), z)


def xyz_from_z(z):
    z = np.asarray(z, dtype=complex)
    inf = ~np.isfinite(z)
    zz = np.where(inf, 0.0, z)
    r2 = np.abs(zz) ** 2
    out = np.stack([2 * zz.real / (1 + r2), 2 * zz.imag / (1 + r2), (1 - r2) / (1 + r2)], axis=-1)
    out[inf] = (0.0, 0.0, -1.0)
    return out


def canonical_coords(xyz):
    """Coordinate in the chart used for evaluation: north when Zc >= 0."""
    xyz = np.asarray(xyz, dtype=float)
    X, Y, Z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    north = Z >= 0
    den = np.where(north, 1.0 + Z, 1.0 - Z)
    c = np.where(north, X + 1j * Y, X - 1j * Y) / den
    return north, c


@dataclass(frozen=True)
class SpherePoint:
    chart: str
    coord: complex

    def __post_init__(self):
        if self.chart not in ("north", "south"):
            raise ValueError(f"chart must be 'north' or 'south', got {self.chart!r}")
        c = complex(self.coord)
        if not np.isfinite(c):
            raise ValueError("coordinate must be finite; use the other chart")
        if abs(c) > 1.0 + CHI_OVERLAP:
            object.__setattr__(self, "chart", "south" if self.chart == "north" else "north")
            c = 1.0 / c
        object.__setattr__(self, "coord", c)

    @classmethod
    def from_z(cls, z):
        z = complex(z)
        if not np.isfinite(z):
            return cls("south", 0j)
        return cls("north", z)

    @classmethod
    def from_xyz(cls, xyz):
        xyz = np.asarray(xyz, dtype=float)
        xyz = xyz / np.linalg.norm(xyz)
        north, c = canonical_coords(xyz)
        return cls("north" if north else "south", complex(c))

    def in_chart(self, chart):
        if chart == self.chart:
            return self.coord
        if self.coord == 0:
            return complex(np.inf, 0.0)
        return 1.0 / self.coord

    def other_chart(self):
        """Coordinate re-expressed in the opposite chart, z -> 1/z."""
        if self.coord == 0:
            raise ValueError("pole of the current chart has no coordinate in the other chart")
        return ("south" if self.chart == "north" else "north"), 1.0 / self.coord

    @property
    def z(self):
        return self.in_chart("north")

    @property
    def xyz(self):
        if self.chart == "north":
            return xyz_from_z(self.coord)
        w = self.coord
        if w == 0:
            return np.array([0.0, 0.0, -1.0])
        return xyz_from_z(1.0 / w)


def as_xyz(points):
    """Accept SpherePoints, complex z values or unit vectors; return (n, 3)."""
    if isinstance(points, SpherePoint):
        return points.xyz[None, :]
    arr = np.asarray(points)
    if arr.dtype == object:
        return np.array([p.xyz if isinstance(p, SpherePoint) else xyz_from_z(p) for p in points])
    if np.iscomplexobj(arr):
        return xyz_from_z(arr).reshape(-1, 3)
    return np.asarray(arr, dtype=float).reshape(-1, 3)


# ---------------------------------------------------------------- divisors

@dataclass(frozen=True)
class Divisor:
    points: tuple = ()

    def __post_init__(self):
        pts = tuple((p if isinstance(p, SpherePoint) else SpherePoint.from_z(p), float(c))
                    for p, c in self.points)
        for _, c in pts:
            if c > 1.0:
                raise ValueError(f"divisor coefficient {c} exceeds 1")
        xyz = np.array([p.xyz for p, _ in pts]).reshape(-1, 3)
        for i in range(len(pts)):
            for j in range(i):
                if chordal2(xyz[i], xyz[j]) <= 0.0:
                    raise ValueError("divisor support points must be distinct")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_z(cls, zs, coeffs):
        return cls(tuple((SpherePoint.from_z(z), c) for z, c in zip(zs, coeffs)))

    @property
    def xyz(self):
        return np.array([p.xyz for p, _ in self.points]).reshape(-1, 3)

    @property
    def coeffs(self):
        return np.array([c for _, c in self.points], dtype=float)

    def __len__(self):
        return len(self.points)

    def is_klt(self):
        return bool(np.all(self.coeffs < 1.0))

    def is_lc(self):
        return bool(np.all(self.coeffs <= 1.0))

    def is_reduced(self):
        return bool(np.all(self.coeffs == 1.0))

    def degree(self):
        return float(self.coeffs.sum())


def triangle_divisor(c=0.75):
    """c times the cube roots of unity."""
    return Divisor.from_z(np.exp(2j * np.pi * np.arange(3) / 3), [c] * 3)


# ---------------------------------------------------------------- weights

@dataclass(frozen=True)
class WeightSpec:
    """Weight on O(d): d log(1+|z|^2) + v(x).

    ``perturbation`` is a callable on unit vectors (n, 3) -> (n,), continuous.
    ``singular`` is a reduced divisor carrying the log-log term
    -2 a log(1 - log s_p(x)), s_p the squared chordal distance to p, which is
    -2 log(-log |s_D|^2) for the section norm rescaled to |s_D|^2 = s/e.
    """
    degree: int
    perturbation: object = None
    singular: Divisor = None
    singular_amplitude: float = 1.0

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError("degree must be a nonnegative integer")
        object.__setattr__(self, "degree", int(self.degree))
        if self.singular is not None and not self.singular.is_reduced():
            raise ValueError("log-log part must sit on a reduced (coefficient 1) divisor")

    def extra(self, xyz):
        """The non-FS part v at the given points."""
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        v = np.zeros(len(xyz))
        if self.perturbation is not None:
            v = v + np.asarray(self.perturbation(xyz), dtype=float)
        if self.singular is not None:
            for p in self.singular.xyz:
                s = chordal2(xyz, p)
                with np.errstate(divide="ignore"):
                    v = v - 2.0 * self.singular_amplitude * np.log(1.0 - np.log(s))
        return v

    def radial_singularities(self, power=1.0):
        """Radial factors of exp(-power * v) at the log-log points."""
        if self.singular is None:
            return []
        q = 2.0 * self.singular_amplitude * power
        return [RadialSingularity(tuple(p), 0.0, q) for p in self.singular.xyz]

    def with_degree(self, d):
        return WeightSpec(d, self.perturbation, self.singular, self.singular_amplitude)

    def is_fs(self):
        return self.perturbation is None and self.singular is None


def fs_weight(d):
    return WeightSpec(d)


# ---------------------------------------------------------------- measures

@dataclass(frozen=True)
class BackgroundMeasure:
    """Measure mu0 = rho0 * omega.

    kind 'smooth': rho0 = scale * exp(log_density).
    kind 'klt': additionally prod s_p^(-c_p) over a klt divisor.
    kind 'poincare': reduced points get 1 / (s (1 - log s)^2), the growth of
    a Poincare metric, and klt points keep s^(-c).  With ``raw=True`` the
    reduced points get plain 1/s (infinite mass, only usable against cusp
    sections).
    """
    kind: str = "smooth"
    divisor: Divisor = None
    scale: float = 1.0
    log_density: object = None
    raw: bool = False

    def __post_init__(self):
        if self.kind not in ("smooth", "klt", "poincare"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.kind == "klt":
            if self.divisor is None:
                raise ValueError("klt measure needs a divisor")
            if not self.divisor.is_klt():
                raise NotKlt("klt measure requires all coefficients < 1")
        if self.kind == "poincare":
            if self.divisor is None or not self.divisor.is_lc():
                raise ValueError("poincare measure needs an lc divisor")
        if self.kind == "smooth" and self.divisor is not None and len(self.divisor):
            raise ValueError("smooth measure takes no divisor")

    def radial_singularities(self):
        if self.divisor is None:
            return []
        out = []
        for p, c in zip(self.divisor.xyz, self.divisor.coeffs):
            if self.kind == "poincare" and c == 1.0:
                out.append(RadialSingularity(tuple(p), 1.0, 0.0 if self.raw else -2.0))
            else:
                out.append(RadialSingularity(tuple(p), c, 0.0))
        return merge_singularities(out)

    def log_rho(self, xyz):
        """log of d mu0 / d omega."""
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        out = np.full(len(xyz), np.log(self.scale))
        if self.log_density is not None:
            out = out + np.asarray(self.log_density(xyz), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            for sg in self.radial_singularities():
                s = chordal2(xyz, sg.point)
                ls = np.log(s)
                term = -sg.c * ls
                if sg.q != 0.0:
                    term = term + sg.q * np.log(1.0 - ls)
                # exact zeros of s: +inf for poles, -inf for zeros
                term = np.where(s == 0.0, np.inf if sg.c > 0 else -np.inf, term)
                out = out + term
        return out

    def rho(self, xyz):
        return np.exp(self.log_rho(xyz))

    def scaled(self, factor):
        return BackgroundMeasure(self.kind, self.divisor, self.scale * factor, self.log_density, self.raw)

    def with_log_density(self, g):
        if self.log_density is None:
            h = g
        else:
            f0 = self.log_density
            h = lambda x: f0(x) + g(x)
        return BackgroundMeasure(self.kind, self.divisor, self.scale, h, self.raw)

    def is_finite(self):
        return all(sg.integrable() for sg in self.radial_singularities())

    def total_mass(self, quad=QuadratureSpec()):
        if not self.is_finite():
            return np.inf
        return float(sphere_integral(self.rho, self.radial_singularities(), quad))


def fs_measure():
    return BackgroundMeasure("smooth")


def klt_measure(divisor, scale=1.0):
    return BackgroundMeasure("klt", divisor, scale)


def measure_log_density(mu0, p):
    return float(mu0.log_rho(as_xyz(p))[0])


# ---------------------------------------------------------------- sections

@dataclass(frozen=True)
class SectionBasis:
    degree: int
    coeffs: np.ndarray
    orthonormal: str = None   # tag of the (weight, measure) pair, if any

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=complex))
        if c.shape[1] != self.degree + 1:
            raise ValueError("coefficient vectors must have length d + 1")
        if c.shape[0] > self.degree + 1:
            raise ValueError("N must not exceed d + 1")
        if c.shape[0] and np.linalg.matrix_rank(c, tol=1e-12 * max(1.0, np.abs(c).max())) < c.shape[0]:
            raise ValueError("section coefficient vectors are linearly dependent")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "degree", int(self.degree))

    @property
    def N(self):
        return self.coeffs.shape[0]

    def transformed(self, C, orthonormal=None):
        """Basis C @ s (rows are new sections)."""
        return SectionBasis(self.degree, np.asarray(C) @ self.coeffs, orthonormal)

    def eval_rows(self, xyz):
        """Matrix of weighted values s_n(x_j) (1+|z_j|^2)^(-d/2), each point in
        its canonical chart.  Rows computed in different charts differ from
        the north-chart expression by a unimodular factor only."""
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        d = self.degree
        north, c = canonical_coords(xyz)
        pw = c[:, None] ** np.arange(d + 1)[None, :]
        pw = np.where(north[:, None], pw, pw[:, ::-1])
        vals = pw @ self.coeffs.T
        return vals / (1.0 + np.abs(c) ** 2)[:, None] ** (0.5 * d)

    def to_json(self):
        return json.dumps({"degree": self.degree,
                           "orthonormal": self.orthonormal,
                           "coeffs": [[[float(a.real), float(a.imag)] for a in row]
                                      for row in self.coeffs]})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        co = np.array([[complex(re, im) for re, im in row] for row in obj["coeffs"]])
        return cls(int(obj["degree"]), co.reshape(-1, int(obj["degree"]) + 1), obj.get("orthonormal"))


def monomial_basis(d):
    if d < 0:
        raise ValueError("d must be nonnegative")
    return SectionBasis(d, np.eye(d + 1, dtype=complex))


def fs_orthonormal_basis(d):
    """Closed-form orthonormal basis for the FS weight and omega."""
    scale = np.sqrt([(d + 1) * comb(d, i) for i in range(d + 1)])
    return SectionBasis(d, np.diag(scale).astype(complex), orthonormal="fs/omega")


def cusp_basis(d, D_lc):
    """Sections of O(d) vanishing at every support point of a reduced divisor."""
    if not D_lc.is_reduced():
        raise ValueError("cusp forms are taken along a reduced divisor")
    n = len(D_lc)
    if d + 1 <= n:
        raise EmptySpace(f"no sections of O({d}) vanish at {n} points")
    q = np.array([1.0 + 0j])
    at_infinity = 0
    for p, _ in D_lc.points:
        z = p.z
        if not np.isfinite(z):
            at_infinity += 1
            continue
        q = np.convolve(q, np.array([-z, 1.0]))   # ascending coefficients
    nfree = d + 1 - n
    rows = []
    for j in range(nfree):
        co = np.zeros(d + 1, dtype=complex)
        co[j:j + len(q)] = q
        rows.append(co)
    assert at_infinity <= 1
    return SectionBasis(d, np.array(rows))


def vanishing_order(coeffs, d, xyz, tol=1e-10):
    """Order of vanishing of the section at a point (via its local chart)."""
    coeffs = np.asarray(coeffs, dtype=complex)
    north, c = canonical_coords(np.asarray(xyz, dtype=float)[None, :])
    a = coeffs if north[0] else coeffs[::-1]
    # Taylor coefficients at c of sum a_i t^i
    poly = np.polynomial.Polynomial(a)
    scale = np.abs(a).max()
    for k in range(d + 1):
        if abs(poly(c[0])) > tol * scale:
            return k
        poly = poly.deriv() / (k + 1)
    return d + 1


# ---------------------------------------------------------------- densities

def log_det_slater(basis, cfg, w=None):
    """log ||det S(x_1..x_N)||^2 for the weight w (FS on O(d) when None)."""
    xyz = as_xyz(cfg)
    if len(xyz) != basis.N:
        raise ValueError(f"configuration has {len(xyz)} points, basis has {basis.N}")
    return float(log_det_slater_batch(basis, xyz[None], w)[0])


def log_det_slater_batch(basis, X, w=None):
    """Vectorised log_det_slater over an (M, N, 3) stack of configurations."""
    X = np.asarray(X, dtype=float)
    M, N, _ = X.shape
    A = basis.eval_rows(X.reshape(-1, 3)).reshape(M, N, basis.N)
    _, logabs = np.linalg.slogdet(A)
    out = 2.0 * logabs
    if w is not None and not w.is_fs():
        v = w.extra(X.reshape(-1, 3)).reshape(M, N)
        out = out - v.sum(axis=1)
    # repeated points give an exactly singular matrix
    if N > 1:
        d2 = np.sum((X[:, :, None, :] - X[:, None, :, :]) ** 2, axis=-1)
        d2[:, np.arange(N), np.arange(N)] = 1.0
        out = np.where((d2 == 0.0).any(axis=(1, 2)), -np.inf, out)
    return np.where(np.isnan(out), -np.inf, out)


def pointwise_norm2(coeffs, point, w, chart):
    """||s(p)||^2 of a single section computed in the requested chart."""
    coeffs = np.asarray(coeffs, dtype=complex)
    d = w.degree
    c = point.in_chart(chart)
    if not np.isfinite(c):
        raise ValueError("point is the pole of the requested chart")
    a = coeffs if chart == "north" else coeffs[::-1]
    val = np.polynomial.polynomial.polyval(c, a)
    norm = abs(val) ** 2 / (1.0 + abs(c) ** 2) ** d
    return norm * np.exp(-w.extra(point.xyz[None])[0])


# ---------------------------------------------------------------- Gram matrices

def _gram_singularities(basis, w, mu0, power=1.0):
    """Radial profiles of the Gram integrand, corrected for the common
    vanishing order of the basis at each singular point."""
    sing = merge_singularities(mu0.radial_singularities() + w.radial_singularities(power))
    out = []
    for sg in sing:
        # |s_n|^2 vanishes to order 2 ord_p(s_n) in |z - p|, which is order
        # ord_p(s_n) in the chordal variable
        orders = [vanishing_order(co, basis.degree, sg.point) for co in basis.coeffs]
        for o in orders:
            if not RadialSingularity(sg.xyz, sg.c - o, sg.q).integrable():
                raise DivergentIntegral(
                    "L2 norm diverges at a singular point of the measure; use cusp sections")
        out.append(RadialSingularity(sg.xyz, sg.c - min(orders), sg.q))
    return out


def gram_matrix(basis, w, mu0, quad=QuadratureSpec()):
    """<s_i, s_j> = integral of s_i conj(s_j) e^{-weight} d mu0."""
    if w.degree != basis.degree:
        raise ValueError("weight degree does not match the basis")
    sing = _gram_singularities(basis, w, mu0)

    def f(xyz):
        R = basis.eval_rows(xyz)
        dens = mu0.rho(xyz)
        if not w.is_fs():
            dens = dens * np.exp(-w.extra(xyz))
        dens = np.where(np.isfinite(dens), dens, 0.0)
        return R[:, :, None] * np.conj(R[:, None, :]) * dens[:, None, None]

    G = sphere_integral(f, sing, quad)
    G = 0.5 * (G + G.conj().T)
    return G


def orthonormalize(basis, gram, tag="custom"):
    gram = np.asarray(gram, dtype=complex)
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.min(np.linalg.eigvalsh(gram)) <= 0:
        raise NotPositiveDefinite("Gram matrix has a nonpositive eigenvalue")
    return basis.transformed(np.linalg.inv(L), orthonormal=tag)


def orthonormal_basis(basis, w, mu0, quad=QuadratureSpec(), tag=None):
    G = gram_matrix(basis, w, mu0, quad)
    return orthonormalize(basis, G, tag or "quadrature")


def bergman_function(basis, w, xyz):
    """sum_i ||s_i(x)||^2 for the given weight; for an orthonormal basis the
    sup over x is the sup/L2 distortion of the section space."""
    R = basis.eval_rows(as_xyz(xyz))
    val = np.sum(np.abs(R) ** 2, axis=1)
    if not w.is_fs():
        val = val * np.exp(-w.extra(xyz))
    return val


def bernstein_markov_distortion(k, D_lc, d=2, amplitude=1.0, quad=QuadratureSpec(m=32), n_probe=64):
    """Distortion sup ||s||^2 / ||s||_L2^2 over cusp sections of O(dk) with
    the log-log weight (amplitude k a) against the Poincare measure of D_lc."""
    basis = cusp_basis(d * k, D_lc)
    w = WeightSpec(d * k, None, D_lc, k * amplitude)
    mu0 = BackgroundMeasure("poincare", D_lc)
    onb = orthonormal_basis(basis, w, mu0, quad, tag="cusp")
    th = np.arccos(1 - 2 * (np.arange(n_probe * 2) + 0.5) / (n_probe * 2))
    ph = np.pi * (3 - np.sqrt(5)) * np.arange(n_probe * 2)
    pts = [np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=1)]
    # probe the approach to the cusp points as well
    for p in D_lc.xyz:
        a = np.array([0.0, 0.0, 1.0]) if abs(p[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = a - (a @ p) * p
        e1 /= np.linalg.norm(e1)
        for s in np.logspace(-12, -0.5, 60):
            pts.append((1 - 2 * s) * p + 2 * np.sqrt(s * (1 - s)) * e1)
    P = np.vstack(pts)
    P /= np.linalg.norm(P, axis=1)[:, None]
    return float(np.max(bergman_function(onb, w, P)))
