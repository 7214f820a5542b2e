"""Sphere grids, cell quadrature with graded refinement near singular points,
finite-volume Laplacian and grid interpolation.

Everything here works with unit vectors in R^3.  Integrals are taken against
the Fubini-Study area form normalised to a probability measure, i.e. the
round area divided by 4 pi.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy import integrate

FOUR_PI = 4.0 * np.pi


# ---------------------------------------------------------------- coordinates

def xyz_from_angles(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_xyz(xyz):
    xyz = np.asarray(xyz, dtype=float)
    theta = np.arccos(np.clip(xyz[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(xyz[..., 1], xyz[..., 0]), 2 * np.pi)
    return theta, phi


def chordal2(a, b):
    """Squared chordal distance on the sphere of diameter one, sin^2(gamma/2)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return 0.25 * np.sum(d * d, axis=-1)


# ---------------------------------------------------------------- singularities

@dataclass(frozen=True)
class RadialSingularity:
    """Factor s^-c (1 - log s)^q in the chordal variable s = chordal2(x, p).

    Under the probability area form, s is uniformly distributed on [0, 1] as
    seen from p, which makes the tail integrals one dimensional.
    """
    xyz: tuple
    c: float = 0.0
    q: float = 0.0

    @property
    def point(self):
        return np.asarray(self.xyz, dtype=float)

    def sigma(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(s, -self.c) * np.power(1.0 - np.log(s), self.q)
        return out

    def integrable(self):
        return self.c < 1.0 or (self.c == 1.0 and self.q < -1.0)

    def tail(self, t):
        """Integral of sigma over [0, t]."""
        if t <= 0:
            return 0.0
        if not self.integrable():
            return np.inf
        y0 = -np.log(t)
        if self.c == 1.0:
            return (1.0 + y0) ** (self.q + 1.0) / (-(self.q + 1.0))
        # substitute s = exp(-y)
        f = lambda y: np.exp(-(1.0 - self.c) * y) * (1.0 + y) ** self.q
        val, _ = integrate.quad(f, y0, np.inf, limit=200)
        return val


def merge_singularities(items, tol=1e-12):
    """Multiply radial factors sitting at the same point."""
    out = []
    for it in items:
        for j, o in enumerate(out):
            if chordal2(o.point, it.point) < tol:
                out[j] = RadialSingularity(o.xyz, o.c + it.c, o.q + it.q)
                break
        else:
            out.append(it)
    return [o for o in out if o.c != 0.0 or o.q != 0.0]


# ---------------------------------------------------------------- grids

class SphereGrid:
    """Latitude bands times 2m longitudes.

    kind='latlon' spaces the band edges uniformly in theta (used by the
    oracle), kind='equal_area' spaces them uniformly in cos(theta) so every
    cell has area 1/(2 m^2) (used for histograms).
    """

    def __init__(self, m, kind="latlon"):
        m = int(m)
        if m < 1:
            raise ValueError("grid resolution m must be >= 1")
        if kind not in ("latlon", "equal_area"):
            raise ValueError(f"unknown grid kind {kind!r}")
        self.m = m
        self.kind = kind
        self.nphi = 2 * m
        if kind == "latlon":
            self.theta_edges = np.linspace(0.0, np.pi, m + 1)
            self.theta_centers = 0.5 * (self.theta_edges[1:] + self.theta_edges[:-1])
        else:
            t = np.linspace(1.0, -1.0, m + 1)
            self.theta_edges = np.arccos(t)
            self.theta_edges[0], self.theta_edges[-1] = 0.0, np.pi
            self.theta_centers = np.arccos(0.5 * (t[1:] + t[:-1]))
        self.phi_edges = np.linspace(0.0, 2 * np.pi, self.nphi + 1)
        self.phi_centers = 0.5 * (self.phi_edges[1:] + self.phi_edges[:-1])
        self.dphi = 2 * np.pi / self.nphi
        band_area = 0.5 * (np.cos(self.theta_edges[:-1]) - np.cos(self.theta_edges[1:]))
        self.areas = np.repeat(band_area / self.nphi, self.nphi)
        self.band = np.repeat(np.arange(m), self.nphi)
        self.sector = np.tile(np.arange(self.nphi), m)
        self.center_theta = self.theta_centers[self.band]
        self.center_phi = self.phi_centers[self.sector]
        self.centers = xyz_from_angles(self.center_theta, self.center_phi)
        self._lap = None

    @property
    def n(self):
        return self.m * self.nphi

    @property
    def h(self):
        return np.pi / self.m

    def key(self):
        return (self.kind, self.m)

    def __eq__(self, other):
        return isinstance(other, SphereGrid) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"SphereGrid(m={self.m}, kind={self.kind!r})"

    def locate(self, xyz):
        theta, phi = angles_from_xyz(xyz)
        b = np.clip(np.searchsorted(self.theta_edges, theta, side="right") - 1, 0, self.m - 1)
        s = np.clip((phi / self.dphi).astype(np.int64), 0, self.nphi - 1)
        return b * self.nphi + s

    def chart_of_cells(self):
        return np.where(self.center_theta <= np.pi / 2, "north", "south")

    def laplacian(self):
        """Finite-volume operator L with (L u)_i ~ integral over cell i of
        dd^c u, measured against the probability area form.  L is symmetric
        and negative semidefinite with constants in its kernel."""
        if self._lap is not None:
            return self._lap
        m, nphi = self.m, self.nphi
        te, tc = self.theta_edges, self.theta_centers
        rows, cols, vals = [], [], []
        idx = np.arange(self.n).reshape(m, nphi)
        # meridional faces between neighbouring sectors
        wphi = (te[1:] - te[:-1]) / (np.sin(tc) * self.dphi)
        for j in range(m):
            a = idx[j]
            b = np.roll(idx[j], -1)
            w = np.full(nphi, wphi[j])
            rows += [a, b]
            cols += [b, a]
            vals += [w, w]
        # latitude faces between bands
        for j in range(m - 1):
            w = np.sin(te[j + 1]) * self.dphi / (tc[j + 1] - tc[j])
            a = idx[j]
            b = idx[j + 1]
            rows += [a, b]
            cols += [b, a]
            vals += [np.full(nphi, w)] * 2
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals) / FOUR_PI
        W = sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        D = sp.diags(np.asarray(W.sum(axis=1)).ravel())
        self._lap = (W - D).tocsr()
        return self._lap

    def interpolate(self, values, xyz):
        """Bilinear interpolation in (theta, phi) between cell centres, with
        ring averages used as pole values."""
        values = np.asarray(values, dtype=float).reshape(self.m, self.nphi)
        theta, phi = angles_from_xyz(xyz)
        th = np.concatenate([[0.0], self.theta_centers, [np.pi]])
        ext = np.vstack([np.full(self.nphi, values[0].mean()), values,
                         np.full(self.nphi, values[-1].mean())])
        j = np.clip(np.searchsorted(th, theta, side="right") - 1, 0, len(th) - 2)
        tj = (theta - th[j]) / (th[j + 1] - th[j])
        x = phi / self.dphi - 0.5
        s0 = np.floor(x).astype(np.int64)
        fs = x - s0
        s0 = np.mod(s0, self.nphi)
        s1 = np.mod(s0 + 1, self.nphi)
        v0 = (1 - fs) * ext[j, s0] + fs * ext[j, s1]
        v1 = (1 - fs) * ext[j + 1, s0] + fs * ext[j + 1, s1]
        return (1 - tj) * v0 + tj * v1

    def sample_uniform_in_cells(self, cells, rng):
        """Uniform (area) points inside the given cells."""
        cells = np.asarray(cells)
        b, s = cells // self.nphi, cells % self.nphi
        ta = np.cos(self.theta_edges[b])
        tb = np.cos(self.theta_edges[b + 1])
        t = ta + (tb - ta) * rng.random(len(cells))
        phi = self.phi_edges[s] + self.dphi * rng.random(len(cells))
        theta = np.arccos(np.clip(t, -1.0, 1.0))
        return xyz_from_angles(theta, phi)


# ---------------------------------------------------------------- quadrature

@dataclass(frozen=True)
class QuadratureSpec:
    m: int = 16           # latitude bands of the base mesh
    order: int = 6        # Gauss-Legendre nodes per direction in every box
    max_depth: int = 40   # refinement levels towards singular points
    near: float = 1.0     # refine boxes closer to a singular point than near*diam


@lru_cache(maxsize=None)
def _gl(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def _box_nodes(boxes, order):
    """Tensor Gauss-Legendre nodes for boxes (ta, tb, pa, pb) in (theta, phi)."""
    x, w = _gl(order)
    ta, tb, pa, pb = (boxes[:, i:i + 1] for i in range(4))
    th = 0.5 * (ta + tb) + 0.5 * (tb - ta) * x[None, :]
    ph = 0.5 * (pa + pb) + 0.5 * (pb - pa) * x[None, :]
    wt = 0.5 * (tb - ta) * w[None, :] * np.sin(th)
    wp = 0.5 * (pb - pa) * w[None, :]
    TH = np.repeat(th, order, axis=1)
    PH = np.tile(ph, (1, order))
    W = (wt[:, :, None] * wp[:, None, :]).reshape(len(boxes), -1) / FOUR_PI
    return xyz_from_angles(TH, PH), W


def _box_dist_diam(box, theta_p, phi_p):
    ta, tb, pa, pb = box
    tcl = min(max(theta_p, ta), tb)
    dphi = np.mod(phi_p - pa, 2 * np.pi)
    width = pb - pa
    if dphi <= width:
        pcl = phi_p
    else:
        pcl = pa if (2 * np.pi - dphi) < (dphi - width) else pb
    a = xyz_from_angles(theta_p, phi_p)
    b = xyz_from_angles(tcl, pcl)
    dist = 2 * np.arcsin(min(1.0, 0.5 * np.linalg.norm(a - b)))
    smax = 1.0 if ta <= np.pi / 2 <= tb else max(np.sin(ta), np.sin(tb))
    diam = np.hypot(tb - ta, smax * width)
    return dist, diam


def _contains(box, theta_p, phi_p):
    ta, tb, pa, pb = box
    if theta_p < ta or theta_p > tb:
        return False
    if ta == 0.0 and theta_p == 0.0 or tb == np.pi and theta_p == np.pi:
        return True
    d = np.mod(phi_p - pa, 2 * np.pi)
    return d <= pb - pa


def _split(box):
    ta, tb, pa, pb = box
    smax = 1.0 if ta <= np.pi / 2 <= tb else max(np.sin(ta), np.sin(tb))
    dt, dp = tb - ta, smax * (pb - pa)
    tm, pm = 0.5 * (ta + tb), 0.5 * (pa + pb)
    if dt >= 2 * dp:
        return [(ta, tm, pa, pb), (tm, tb, pa, pb)]
    if dp >= 2 * dt:
        return [(ta, tb, pa, pm), (ta, tb, pm, pb)]
    return [(ta, tm, pa, pm), (ta, tm, pm, pb), (tm, tb, pa, pm), (tm, tb, pm, pb)]


def cell_integrals(grid, f, singular=(), spec=QuadratureSpec()):
    """Integrals of f over every cell of ``grid`` against the probability
    area form.

    ``f`` maps an (n, 3) array of unit vectors to an (n,) or (n, ...) array.
    ``singular`` lists RadialSingularity factors already contained in f;
    cells near them are refined towards the point and the innermost box is
    replaced by the exact one dimensional tail of the radial profile.
    """
    singular = merge_singularities(list(singular))
    order = spec.order
    boxes = np.stack([grid.theta_edges[grid.band], grid.theta_edges[grid.band + 1],
                      grid.phi_edges[grid.sector], grid.phi_edges[grid.sector + 1]], axis=1)
    special = {}
    sing_ang = [angles_from_xyz(sg.point) for sg in singular]
    for si, (tp, pp) in enumerate(sing_ang):
        for c in range(grid.n):
            dist, diam = _box_dist_diam(boxes[c], tp, pp)
            if dist < spec.near * diam:
                special.setdefault(c, []).append(si)
    regular = np.array([c for c in range(grid.n) if c not in special], dtype=np.int64)

    out = None
    chunk = max(1, 200000 // (order * order))
    for start in range(0, len(regular), chunk):
        ids = regular[start:start + chunk]
        X, W = _box_nodes(boxes[ids], order)
        vals = np.asarray(f(X.reshape(-1, 3)))
        vals = vals.reshape((len(ids), order * order) + vals.shape[1:])
        res = np.einsum("bq,bq...->b...", W, vals)
        if out is None:
            out = np.zeros((grid.n,) + res.shape[1:], dtype=res.dtype)
        out[ids] = res
    if out is None:
        probe = np.asarray(f(grid.centers[:1]))
        out = np.zeros((grid.n,) + probe.shape[1:], dtype=probe.dtype)

    tails = {}
    for c, sis in special.items():
        leaves = []
        stack = [(tuple(boxes[c]), 0)]
        while stack:
            box, depth = stack.pop()
            near = []
            for si in sis:
                dist, diam = _box_dist_diam(box, *sing_ang[si])
                if dist < spec.near * diam:
                    near.append(si)
            if not near:
                leaves.append(box)
            elif depth < spec.max_depth and box[1] - box[0] > 1e-12:
                stack.extend((b, depth + 1) for b in _split(box))
            else:
                # innermost boxes around a singular point are pooled and
                # replaced by the radial tail over the same area
                si = min(near, key=lambda i: _box_dist_diam(box, *sing_ang[i])[0])
                tails.setdefault(si, []).append((c, box))
        if leaves:
            X, W = _box_nodes(np.array(leaves), order)
            vals = np.asarray(f(X.reshape(-1, 3)))
            vals = vals.reshape((len(leaves), order * order) + vals.shape[1:])
            out[c] = out[c] + np.einsum("bq,bq...->...", W, vals)
    for si, items in tails.items():
        areas = np.array([_box_area(b) for _, b in items])
        far = max(items, key=lambda it: _box_dist_diam(it[1], *sing_ang[si])[0])[1]
        g = _regular_part(f, far, singular[si])
        total = g * singular[si].tail(areas.sum())
        for (c, _), a in zip(items, areas):
            out[c] = out[c] + total * (a / areas.sum())
    return out


def _box_area(box):
    ta, tb, pa, pb = box
    return 2 * np.sin(0.5 * (ta + tb)) * np.sin(0.5 * (tb - ta)) * (pb - pa) / FOUR_PI


def _regular_part(f, box, sg):
    """f / sigma evaluated at the centre of a box next to the singular point."""
    ta, tb, pa, pb = box
    probe = xyz_from_angles(0.5 * (ta + tb), 0.5 * (pa + pb))
    s = chordal2(probe, sg.point)
    if s <= 0:
        probe = xyz_from_angles(tb, pb)
        s = chordal2(probe, sg.point)
    return np.asarray(f(probe[None, :]))[0] / sg.sigma(s)


def sphere_integral(f, singular=(), spec=QuadratureSpec()):
    grid = _base_grid(spec.m)
    return cell_integrals(grid, f, singular, spec).sum(axis=0)


@lru_cache(maxsize=8)
def _base_grid(m):
    return SphereGrid(m, "latlon")
