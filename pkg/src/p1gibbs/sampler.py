"""Metropolis-Hastings sampler for the determinantal Gibbs measures

    mu^(N, beta)  ~  ||det S(x_1..x_N)||^(2 beta / k)  exp(-beta sum u(x_j))  mu0^N

with rank-one updates of the inverse evaluation matrix.  The inner loop is a
numba kernel; chains are independent and seeded from a SeedSequence.
"""
from dataclasses import dataclass, field
import json

import numpy as np
from numba import njit

from .errors import NonFiniteDensityEverywhere, NonPositiveDensity, SingularState
from .geometry import (BackgroundMeasure, SectionBasis, SpherePoint, WeightSpec, as_xyz,
                       canonical_coords, fs_measure, log_det_slater, log_det_slater_batch)
from .quadrature import SphereGrid, angles_from_xyz, chordal2, merge_singularities, RadialSingularity

TABLE_M = 256
REBUILD_LOG_RATIO = 2.0   # rebuild after accepting |ratio| outside [e^-2, e^2]
RESIDUAL_TOL = 1e-9       # rebuild when a row of A Ainv drifts this far from I


# ---------------------------------------------------------------- phases

@dataclass(frozen=True)
class PhaseSpec:
    """fixed: a single beta (any sign, nonzero).  scaled: a table k -> beta_k >= 0,
    used as the effective inverse temperature at level k."""
    mode: str = "fixed"
    beta: float = 1.0
    table: tuple = ()

    def __post_init__(self):
        if self.mode not in ("fixed", "scaled"):
            raise ValueError("phase mode must be 'fixed' or 'scaled'")
        if self.mode == "fixed" and self.beta == 0:
            raise ValueError("fixed phase needs beta != 0; use the scaled mode for beta_k = 0")
        if self.mode == "scaled":
            for _, b in self.table:
                if b < 0:
                    raise ValueError("scaled phase needs beta_k >= 0")

    def beta_at(self, k):
        if self.mode == "fixed":
            return float(self.beta)
        tab = dict(self.table)
        if k not in tab:
            raise KeyError(f"no beta_k given for k={k}")
        return float(tab[k])

    def beta_k_times_k(self, k):
        return self.beta_at(k) * k


# ---------------------------------------------------------------- model

@dataclass
class GibbsModel:
    """Target density data.  ``tilt`` is an optional continuous u(x)."""
    basis: SectionBasis
    k: int
    beta: float
    weight: WeightSpec = None
    mu0: BackgroundMeasure = None
    tilt: object = None

    def __post_init__(self):
        if self.weight is None:
            self.weight = WeightSpec(self.basis.degree)
        if self.mu0 is None:
            self.mu0 = fs_measure()
        if self.weight.degree != self.basis.degree:
            raise ValueError("weight degree must match the basis degree")

    @property
    def N(self):
        return self.basis.N

    @property
    def alpha(self):
        """Exponent on ||det||^2."""
        return self.beta / self.k

    def singularities(self):
        sing = list(self.mu0.radial_singularities())
        if self.weight.singular is not None and self.alpha != 0:
            # exp(-alpha v) with v the log-log part
            sing += self.weight.radial_singularities(power=self.alpha)
        return merge_singularities(sing)

    def smooth_log(self, xyz):
        """Continuous part of the one-particle log factor."""
        out = np.full(len(xyz), np.log(self.mu0.scale))
        if self.mu0.log_density is not None:
            out = out + self.mu0.log_density(xyz)
        if self.weight.perturbation is not None and self.alpha != 0:
            out = out - self.alpha * np.asarray(self.weight.perturbation(xyz))
        if self.tilt is not None:
            out = out - self.beta * np.asarray(self.tilt(xyz))
        return out

    def has_field(self):
        return (self.mu0.log_density is not None or self.tilt is not None
                or (self.weight.perturbation is not None and self.alpha != 0))

    def log_one(self, xyz):
        """log of the one-particle factor (mu0 density, weight and tilt parts)."""
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        out = self.smooth_log(xyz)
        with np.errstate(divide="ignore", invalid="ignore"):
            for sg in self.singularities():
                s = chordal2(xyz, sg.point)
                ls = np.log(s)
                term = -sg.c * ls + (sg.q * np.log(1.0 - ls) if sg.q else 0.0)
                out = out + np.where(s == 0, np.inf if sg.c > 0 else -np.inf, term)
        return out

    def log_density(self, X):
        """Unnormalised log target at an (M, N, 3) stack of configurations."""
        X = np.asarray(X, dtype=float)
        # weight corrections live in log_one
        ld = log_det_slater_batch(self.basis, X, None)
        one = self.log_one(X.reshape(-1, 3)).reshape(X.shape[0], X.shape[1]).sum(axis=1)
        if self.alpha == 0:
            return one
        with np.errstate(invalid="ignore"):
            return self.alpha * ld + one

    def compile(self):
        """Arrays consumed by the numba kernel."""
        sing = self.singularities()
        sp_xyz = np.array([s.point for s in sing]).reshape(-1, 3)
        sp_c = np.array([s.c for s in sing], dtype=float)
        sp_q = np.array([s.q for s in sing], dtype=float)
        if self.has_field():
            g = SphereGrid(TABLE_M)
            table = self.smooth_log(g.centers).reshape(g.m, g.nphi)
        else:
            table = np.full((1, 1), np.log(self.mu0.scale))
        # global proposal: omega mixed with caps matching the poles of mu0
        cap_xyz, cap_c, cap_kind = [], [], []
        for s in sing:
            if s.c >= 1.0:
                cap_xyz.append(s.point), cap_c.append(1.0), cap_kind.append(1)
            elif s.c > 0:
                cap_xyz.append(s.point), cap_c.append(s.c), cap_kind.append(0)
        ncap = len(cap_xyz)
        w0 = 1.0 if ncap == 0 else 0.5
        cap_w = np.full(ncap, (1.0 - w0) / max(ncap, 1))
        return dict(coeffs=np.ascontiguousarray(self.basis.coeffs),
                    d=self.basis.degree, alpha=float(self.alpha),
                    sp_xyz=np.ascontiguousarray(sp_xyz), sp_c=sp_c, sp_q=sp_q,
                    table=np.ascontiguousarray(table), has_field=self.has_field(),
                    w0=w0, cap_xyz=np.array(cap_xyz).reshape(-1, 3), cap_c=np.array(cap_c, dtype=float),
                    cap_kind=np.array(cap_kind, dtype=np.int64), cap_w=cap_w)


def hamiltonian(cfg, basis, k, w=None, u=None):
    """-(1/k) log ||det S||^2 + sum u(x_i); +inf on the zero divisor."""
    xyz = as_xyz(cfg)
    ld = log_det_slater(basis, xyz, w)
    val = -ld / k
    if u is not None:
        val += float(np.sum(u(xyz)))
    return val


# ---------------------------------------------------------------- numba core

@njit(cache=True, nogil=True)
def _rows(x, coeffs, d, out):
    N = coeffs.shape[0]
    X, Y, Z = x[0], x[1], x[2]
    if Z >= 0.0:
        c = complex(X, Y) / (1.0 + Z)
        north = True
    else:
        c = complex(X, -Y) / (1.0 - Z)
        north = False
    nrm = (1.0 + c.real * c.real + c.imag * c.imag) ** (-0.5 * d)
    for n in range(N):
        acc = 0j
        if north:
            for i in range(d, -1, -1):
                acc = acc * c + coeffs[n, i]
        else:
            for i in range(d + 1):
                acc = acc * c + coeffs[n, i]
        out[n] = acc * nrm


@njit(cache=True, nogil=True)
def _interp_table(x, table):
    m, nphi = table.shape
    if m == 1 and nphi == 1:
        return table[0, 0]
    theta = np.arccos(min(1.0, max(-1.0, x[2])))
    phi = np.arctan2(x[1], x[0])
    if phi < 0:
        phi += 2 * np.pi
    dth = np.pi / m
    dph = 2 * np.pi / nphi
    # extended theta nodes: 0, centres, pi
    t = theta / dth + 0.5     # position in extended index space
    j = int(np.floor(t))
    if j > m:
        j = m
    ft = t - j
    if j == 0:
        ft = theta / (0.5 * dth)
    elif j == m:
        ft = (theta - (m - 0.5) * dth) / (0.5 * dth)
    xs = phi / dph - 0.5
    s0 = int(np.floor(xs))
    fs = xs - s0
    s0 = s0 % nphi
    s1 = (s0 + 1) % nphi
    # ring values (with pole averages)
    if j == 0:
        top = 0.0
        for s in range(nphi):
            top += table[0, s]
        v0 = top / nphi
    else:
        v0 = (1 - fs) * table[j - 1, s0] + fs * table[j - 1, s1]
    if j == m:
        bot = 0.0
        for s in range(nphi):
            bot += table[m - 1, s]
        v1 = bot / nphi
    else:
        v1 = (1 - fs) * table[j, s0] + fs * table[j, s1]
    return (1 - ft) * v0 + ft * v1


@njit(cache=True, nogil=True)
def _log_one(x, sp_xyz, sp_c, sp_q, table, has_field):
    val = 0.0
    for l in range(sp_xyz.shape[0]):
        dx = x[0] - sp_xyz[l, 0]
        dy = x[1] - sp_xyz[l, 1]
        dz = x[2] - sp_xyz[l, 2]
        s = 0.25 * (dx * dx + dy * dy + dz * dz)
        if s <= 0.0:
            if sp_c[l] > 0:
                return np.inf
            if sp_c[l] < 0:
                return -np.inf
            continue
        ls = np.log(s)
        val += -sp_c[l] * ls
        if sp_q[l] != 0.0:
            val += sp_q[l] * np.log(1.0 - ls)
    if has_field:
        val += _interp_table(x, table)
    else:
        val += table[0, 0]
    return val


@njit(cache=True, nogil=True)
def _frame(p):
    # two unit vectors orthogonal to p
    if abs(p[2]) < 0.9:
        a = np.array([0.0, 0.0, 1.0])
    else:
        a = np.array([1.0, 0.0, 0.0])
    e1 = a - (a[0] * p[0] + a[1] * p[1] + a[2] * p[2]) * p
    e1 /= np.sqrt(e1[0] ** 2 + e1[1] ** 2 + e1[2] ** 2)
    e2 = np.array([p[1] * e1[2] - p[2] * e1[1], p[2] * e1[0] - p[0] * e1[2],
                   p[0] * e1[1] - p[1] * e1[0]])
    return e1, e2


@njit(cache=True, nogil=True)
def _log_q(x, w0, cap_xyz, cap_c, cap_kind, cap_w):
    """log density (w.r.t. omega) of the global proposal."""
    q = w0
    for l in range(cap_xyz.shape[0]):
        dx = x[0] - cap_xyz[l, 0]
        dy = x[1] - cap_xyz[l, 1]
        dz = x[2] - cap_xyz[l, 2]
        s = 0.25 * (dx * dx + dy * dy + dz * dz)
        if s <= 0.0:
            return np.inf
        if cap_kind[l] == 1:
            ql = 1.0 / (s * (1.0 - np.log(s)) ** 2)
        else:
            ql = (1.0 - cap_c[l]) * s ** (-cap_c[l])
        q += cap_w[l] * ql
    return np.log(q)


@njit(cache=True, nogil=True)
def _draw_q(w0, cap_xyz, cap_c, cap_kind, cap_w, out):
    u = np.random.random()
    if u < w0 or cap_xyz.shape[0] == 0:
        z = 2.0 * np.random.random() - 1.0
        ph = 2 * np.pi * np.random.random()
        r = np.sqrt(max(0.0, 1.0 - z * z))
        out[0] = r * np.cos(ph)
        out[1] = r * np.sin(ph)
        out[2] = z
        return
    u = (u - w0) / (1.0 - w0)
    acc = 0.0
    l = cap_xyz.shape[0] - 1
    tot = 0.0
    for j in range(cap_xyz.shape[0]):
        tot += cap_w[j]
    for j in range(cap_xyz.shape[0]):
        acc += cap_w[j] / tot
        if u < acc:
            l = j
            break
    v = np.random.random()
    if v <= 0.0:
        v = 1e-300
    if cap_kind[l] == 1:
        s = np.exp(1.0 - 1.0 / v)
    else:
        s = v ** (1.0 / (1.0 - cap_c[l]))
    s = min(s, 1.0)
    cosg = 1.0 - 2.0 * s
    sing = 2.0 * np.sqrt(s * (1.0 - s))
    p = cap_xyz[l]
    e1, e2 = _frame(p)
    psi = 2 * np.pi * np.random.random()
    for a in range(3):
        out[a] = cosg * p[a] + sing * (np.cos(psi) * e1[a] + np.sin(psi) * e2[a])
    nrm = np.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
    for a in range(3):
        out[a] /= nrm


@njit(cache=True, nogil=True)
def _ratio(Ainv, i, row):
    N = row.shape[0]
    r = 0j
    for n in range(N):
        r += row[n] * Ainv[n, i]
    return r


@njit(cache=True, nogil=True)
def _sm_update(A, Ainv, i, row, ratio, tmp):
    """Sherman-Morrison update for replacing row i of A by ``row``."""
    N = row.shape[0]
    # tmp = (row - A[i]) @ Ainv
    for c in range(N):
        acc = 0j
        for n in range(N):
            acc += (row[n] - A[i, n]) * Ainv[n, c]
        tmp[c] = acc
    col = Ainv[:, i].copy()
    for r in range(N):
        f = col[r] / ratio
        for c in range(N):
            Ainv[r, c] -= f * tmp[c]
    for n in range(N):
        A[i, n] = row[n]


@njit(cache=True, nogil=True)
def _row_residual(A, Ainv, j):
    N = A.shape[0]
    err = 0.0
    for c in range(N):
        acc = 0j
        for n in range(N):
            acc += A[j, n] * Ainv[n, c]
        if c == j:
            acc -= 1.0
        e = abs(acc)
        if e > err:
            err = e
    return err


@njit(cache=True, nogil=True)
def _build(pos, coeffs, d, A):
    N = pos.shape[0]
    row = np.empty(coeffs.shape[0], dtype=np.complex128)
    for j in range(N):
        _rows(pos[j], coeffs, d, row)
        for n in range(coeffs.shape[0]):
            A[j, n] = row[n]


@njit(cache=True, nogil=True)
def _mh_core(pos, A, Ainv, lam, i, x, lam_x, alpha, log_hastings, logu, guard2, row, tmp,
             coeffs, d):
    """One MH decision at site i for proposal x.  Returns (code, log|ratio|):
    code 1 accepted, 0 rejected, 2 guard rejection."""
    if lam_x == -np.inf or np.isnan(lam_x):
        return 0, 0.0
    N = pos.shape[0]
    if guard2 > 0.0:
        for j in range(N):
            if j == i:
                continue
            dx = x[0] - pos[j, 0]
            dy = x[1] - pos[j, 1]
            dz = x[2] - pos[j, 2]
            if 0.25 * (dx * dx + dy * dy + dz * dz) < guard2:
                return 2, 0.0
    lr = 0.0
    ratio = 1.0 + 0j
    if alpha != 0.0:
        _rows(x, coeffs, d, row)
        ratio = _ratio(Ainv, i, row)
        mag = abs(ratio)
        if mag == 0.0 or not np.isfinite(mag):
            return 0, 0.0
        lr = np.log(mag)
    logacc = 2.0 * alpha * lr + lam_x - lam[i] + log_hastings
    if lam_x == np.inf:
        logacc = np.inf
    if logu < logacc:
        if alpha != 0.0:
            _sm_update(A, Ainv, i, row, ratio, tmp)
        for a in range(3):
            pos[i, a] = x[a]
        lam[i] = lam_x
        return 1, lr
    return 0, lr


@njit(cache=True, nogil=True)
def _chain_kernel(seed, pos, coeffs, d, alpha, sp_xyz, sp_c, sp_q, table, has_field,
                  w0, cap_xyz, cap_c, cap_kind, cap_w, sigma, p_global, guard2,
                  n_burn, n_keep, thin, rebuild, keep_out, stats):
    """Run burn-in then n_keep*thin sweeps, storing every thin-th configuration.

    stats: [acc_local, prop_local, acc_global, prop_global, guard, max_inv_err,
            max_logdet_drift, fail_flag, n_rebuild]
    """
    np.random.seed(seed)
    N = pos.shape[0]
    Nb = coeffs.shape[0]
    A = np.zeros((N, Nb), dtype=np.complex128)
    Ainv = np.zeros((N, Nb), dtype=np.complex128)
    row = np.empty(Nb, dtype=np.complex128)
    tmp = np.empty(Nb, dtype=np.complex128)
    lam = np.empty(N)
    x = np.empty(3)
    for j in range(N):
        lam[j] = _log_one(pos[j], sp_xyz, sp_c, sp_q, table, has_field)
    logdet = 0.0
    if alpha != 0.0:
        _build(pos, coeffs, d, A)
        Ainv[:, :] = np.linalg.inv(A)
        sgn, logdet = np.linalg.slogdet(A)
    steps = 0
    consecutive = 0
    total = n_burn + n_keep * thin
    kept = 0
    for sweep in range(total):
        for i in range(N):
            glob = np.random.random() < p_global
            if glob:
                _draw_q(w0, cap_xyz, cap_c, cap_kind, cap_w, x)
                lh = (_log_q(pos[i], w0, cap_xyz, cap_c, cap_kind, cap_w)
                      - _log_q(x, w0, cap_xyz, cap_c, cap_kind, cap_w))
                stats[3] += 1
            else:
                nrm = 0.0
                for a in range(3):
                    x[a] = pos[i, a] + sigma * np.random.standard_normal()
                    nrm += x[a] * x[a]
                nrm = np.sqrt(nrm)
                for a in range(3):
                    x[a] /= nrm
                lh = 0.0
                stats[1] += 1
            lam_x = _log_one(x, sp_xyz, sp_c, sp_q, table, has_field)
            logu = np.log(np.random.random())
            code, lr = _mh_core(pos, A, Ainv, lam, i, x, lam_x, alpha, lh, logu, guard2,
                                row, tmp, coeffs, d)
            if code == 1:
                logdet += lr
                consecutive = 0
                if alpha != 0.0:
                    res = max(_row_residual(A, Ainv, i), _row_residual(A, Ainv, (i + 1) % N))
                    if abs(lr) > REBUILD_LOG_RATIO or res > RESIDUAL_TOL:
                        # refresh from scratch before round-off compounds
                        _build(pos, coeffs, d, A)
                        Ainv[:, :] = np.linalg.inv(A)
                        sgn, logdet = np.linalg.slogdet(A)
                        stats[8] += 1
                if glob:
                    stats[2] += 1
                else:
                    stats[0] += 1
            else:
                consecutive += 1
                if code == 2:
                    stats[4] += 1
            if sweep < n_burn and consecutive >= 100000:
                stats[7] = 1.0
                return
            steps += 1
            if alpha != 0.0 and steps % rebuild == 0:
                _build(pos, coeffs, d, A)
                err = 0.0
                P = A @ Ainv
                for r in range(N):
                    for c in range(Nb):
                        e = abs(P[r, c] - (1.0 if r == c else 0.0))
                        if e > err:
                            err = e
                if err > stats[5]:
                    stats[5] = err
                sgn, ld = np.linalg.slogdet(A)
                drift = abs(ld - logdet)
                if drift > stats[6]:
                    stats[6] = drift
                Ainv[:, :] = np.linalg.inv(A)
                logdet = ld
                stats[8] += 1
        if sweep >= n_burn and (sweep - n_burn) % thin == thin - 1:
            for j in range(N):
                for a in range(3):
                    keep_out[kept, j, a] = pos[j, a]
            kept += 1


@njit(cache=True, nogil=True)
def _iid_kernel(seed, n_keep, N, sp_xyz, sp_c, sp_q, table, has_field,
                w0, cap_xyz, cap_c, cap_kind, cap_w, log_bound, keep_out, stats):
    """Exact i.i.d. draws from the normalised one-particle measure by rejection
    from the global proposal (beta = 0 phase)."""
    np.random.seed(seed)
    x = np.empty(3)
    for t in range(n_keep):
        for j in range(N):
            while True:
                _draw_q(w0, cap_xyz, cap_c, cap_kind, cap_w, x)
                lr = (_log_one(x, sp_xyz, sp_c, sp_q, table, has_field)
                      - _log_q(x, w0, cap_xyz, cap_c, cap_kind, cap_w))
                stats[1] += 1
                if lr > log_bound:
                    stats[2] += 1
                if np.log(np.random.random()) < lr - log_bound:
                    break
            stats[0] += 1
            for a in range(3):
                keep_out[t, j, a] = x[a]


def rejection_log_bound(model, comp=None):
    """Numerical sup of log(rho / q) for the rejection sampler, with margin."""
    comp = model.compile() if comp is None else comp
    g = SphereGrid(256)
    pts = [g.centers]
    for p in comp["sp_xyz"]:
        e1, e2 = _frame(np.asarray(p, dtype=float))
        for s in np.logspace(-14, -1, 40):
            cg, sg = 1 - 2 * s, 2 * np.sqrt(s * (1 - s))
            ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
            pts.append(cg * p[None, :] + sg * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2))
    P = np.vstack(pts)
    P /= np.linalg.norm(P, axis=1)[:, None]
    vals = np.array([_log_one(x, comp["sp_xyz"], comp["sp_c"], comp["sp_q"], comp["table"],
                              comp["has_field"])
                     - _log_q(x, comp["w0"], comp["cap_xyz"], comp["cap_c"], comp["cap_kind"],
                              comp["cap_w"]) for x in P])
    vals = vals[np.isfinite(vals)]
    return float(vals.max() + np.log(1.25))


# ---------------------------------------------------------------- Python state API

class ChainState:
    """Configuration, evaluation matrix and its inverse for one chain."""

    def __init__(self, model, cfg, seed=0):
        self.model = model
        self.comp = model.compile()
        self.pos = np.array(as_xyz(cfg), dtype=float)
        if len(self.pos) != model.N:
            raise ValueError("configuration size must equal the basis size")
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self._row = np.empty(model.N, dtype=complex)
        self._tmp = np.empty(model.N, dtype=complex)
        self.rebuild()

    def rebuild(self):
        c = self.comp
        self.lam = np.array([_log_one(x, c["sp_xyz"], c["sp_c"], c["sp_q"], c["table"], c["has_field"])
                             for x in self.pos])
        self.A = np.zeros((self.model.N, self.model.N), dtype=complex)
        _build(self.pos, c["coeffs"], c["d"], self.A)
        sign, ld = np.linalg.slogdet(self.A)
        if sign == 0 or not np.isfinite(ld):
            raise SingularState("evaluation matrix is singular")
        self.Ainv = np.linalg.inv(self.A)
        self.logdet = ld

    @property
    def log_density(self):
        return 2 * self.model.alpha * self.logdet + self.lam.sum()

    def inverse_error(self):
        return float(np.abs(self.A @ self.Ainv - np.eye(self.model.N)).max())


def det_ratio_update(state, site, p):
    """(log|det A_new| - log|det A_old|, inverse after replacing row site by p).
    The state itself is not modified."""
    x = as_xyz(p)[0]
    c = state.comp
    row = np.empty(state.model.N, dtype=complex)
    _rows(x, c["coeffs"], c["d"], row)
    ratio = _ratio(state.Ainv, site, row)
    if abs(ratio) < 1e-300:
        raise SingularState("proposed row makes the matrix singular")
    A = state.A.copy()
    Ainv = state.Ainv.copy()
    _sm_update(A, Ainv, site, row, ratio, np.empty(state.model.N, dtype=complex))
    return float(np.log(abs(ratio))), Ainv


def mh_step(state, site, proposal, beta_N=None, log_hastings=0.0, u=None, guard=0.0):
    """One Metropolis-Hastings decision; mutates and returns the state.

    ``beta_N`` overrides the model's beta for this step (exponent beta_N/k).
    ``u`` is the uniform variate (drawn from the state's rng when None).
    """
    x = as_xyz(proposal)[0]
    c = state.comp
    alpha = state.model.alpha if beta_N is None else beta_N / state.model.k
    lam_x = _log_one(x, c["sp_xyz"], c["sp_c"], c["sp_q"], c["table"], c["has_field"])
    if u is None:
        u = state.rng.random()
    logu = np.log(u) if u > 0 else -np.inf
    code, lr = _mh_core(state.pos, state.A, state.Ainv, state.lam, site, x, lam_x, alpha,
                        log_hastings, logu, guard ** 2, state._row, state._tmp, c["coeffs"], c["d"])
    state.last = int(code)
    if code == 1:
        state.logdet += lr
        N = state.model.N
        if alpha != 0 and (abs(lr) > REBUILD_LOG_RATIO
                           or max(_row_residual(state.A, state.Ainv, site),
                                  _row_residual(state.A, state.Ainv, (site + 1) % N)) > RESIDUAL_TOL):
            state.rebuild()
    state.step += 1
    return state


def acceptance_probability(state, site, proposal, beta_N=None, log_hastings=0.0):
    """min(1, target ratio x proposal correction) without modifying the state."""
    x = as_xyz(proposal)[0]
    model = state.model
    alpha = model.alpha if beta_N is None else beta_N / model.k
    lam_x = model.log_one(x[None])[0]
    if lam_x == -np.inf:
        return 0.0
    lr, _ = det_ratio_update(state, site, x) if alpha != 0 else (0.0, None)
    la = 2 * alpha * lr + lam_x - state.lam[site] + log_hastings
    return float(min(1.0, np.exp(la)))


# ---------------------------------------------------------------- runs

@dataclass
class SamplerConfig:
    chains: int = 1
    n_keep: int = 1000          # retained configurations per chain
    burn_in: int = 10000        # sweeps
    thin: int = 10
    proposal_scale: float = None
    p_global: float = 0.1
    guard: float = 1e-8
    rebuild: int = 1000
    seed: int = 0
    tune_sweeps: int = 200
    tune_rounds: int = 12
    target_acceptance: float = 0.4


@dataclass
class SampleSet:
    positions: np.ndarray            # (n_samples, N, 3) float32
    chain: np.ndarray                # chain id per sample
    sweep: np.ndarray                # sweep index per sample
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.positions.shape[0]

    @property
    def N(self):
        return self.positions.shape[1]

    def points(self):
        return self.positions.reshape(-1, 3).astype(float)

    def site_points(self, site):
        return self.positions[:, site, :].astype(float)

    def to_csv(self, path, header_extra=None):
        north, c = canonical_coords(self.positions.reshape(-1, 3).astype(float))
        sweeps = np.repeat(self.sweep, self.N)
        sites = np.tile(np.arange(self.N), self.n_samples)
        with open(path, "w") as fh:
            if header_extra:
                fh.write(f"# {header_extra}\n")
            fh.write("sweep,site,chart,re,im\n")
            for sw, si, nn, cc in zip(sweeps, sites, north, c):
                fh.write(f"{sw},{si},{'north' if nn else 'south'},{cc.real:.9e},{cc.imag:.9e}\n")

    def save_npz(self, path):
        np.savez(path, positions=self.positions, chain=self.chain, sweep=self.sweep)


def _derive_seeds(seed, n):
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in ss.spawn(n)]


def _initial_positions(model, comp, seed):
    """Random start from the global proposal with finite target density."""
    rng_seed = seed
    pos = np.empty((model.N, 3))
    stats = np.zeros(3)
    logb = rejection_log_bound(model, comp)
    for attempt in range(100000):
        _iid_kernel(rng_seed + attempt, 1, model.N, comp["sp_xyz"], comp["sp_c"], comp["sp_q"],
                    comp["table"], comp["has_field"], comp["w0"], comp["cap_xyz"], comp["cap_c"],
                    comp["cap_kind"], comp["cap_w"], logb, pos[None], stats)
        ld = model.log_density(pos[None])[0]
        if np.isfinite(ld):
            return pos
    raise NonFiniteDensityEverywhere("no initial configuration with finite density")


def _run_one(model, comp, seed, pos0, sigma, cfg, n_burn, n_keep, thin):
    keep = np.zeros((max(n_keep, 1), model.N, 3))
    stats = np.zeros(9)
    pos = pos0.copy()
    guard2 = cfg.guard ** 2 if model.beta < 0 else 0.0
    _chain_kernel(seed, pos, comp["coeffs"], comp["d"], comp["alpha"], comp["sp_xyz"],
                  comp["sp_c"], comp["sp_q"], comp["table"], comp["has_field"], comp["w0"],
                  comp["cap_xyz"], comp["cap_c"], comp["cap_kind"], comp["cap_w"], float(sigma),
                  cfg.p_global, guard2, n_burn, n_keep, thin, cfg.rebuild, keep, stats)
    if stats[7]:
        raise NonFiniteDensityEverywhere(
            "1e5 consecutive rejections during initialisation (Gibbs instability?)")
    return pos, keep[:n_keep], stats


def tune_scale(model, comp, seed, pos0, cfg):
    sigma = 0.3 if cfg.proposal_scale is None else cfg.proposal_scale
    pos = pos0
    seeds = _derive_seeds(seed, cfg.tune_rounds)
    for r in range(cfg.tune_rounds):
        pos, _, st = _run_one(model, comp, seeds[r], pos, sigma, cfg, cfg.tune_sweeps, 0, 1)
        acc = st[0] / max(st[1], 1)
        sigma = float(np.clip(sigma * np.exp(1.5 * (acc - cfg.target_acceptance)), 1e-4, 2.0))
    return sigma, pos


def run_chains(model, cfg=None):
    """Run cfg.chains independent chains; deterministic given cfg.seed.
    ``model`` may also be a RunConfig, which supplies both."""
    if hasattr(model, "to_model"):
        cfg = model.sampler_config() if cfg is None else cfg
        model = model.to_model()
    cfg = SamplerConfig() if cfg is None else cfg
    comp = model.compile()
    seeds = _derive_seeds(cfg.seed, cfg.chains)
    out_pos, out_chain, out_sweep = [], [], []
    diag = {"chains": [], "beta": model.beta, "k": model.k, "N": model.N}
    if model.alpha == 0 and model.tilt is None:
        logb = rejection_log_bound(model, comp)
        for c, s in enumerate(seeds):
            keep = np.zeros((cfg.n_keep, model.N, 3))
            stats = np.zeros(3)
            _iid_kernel(s, cfg.n_keep, model.N, comp["sp_xyz"], comp["sp_c"], comp["sp_q"],
                        comp["table"], comp["has_field"], comp["w0"], comp["cap_xyz"],
                        comp["cap_c"], comp["cap_kind"], comp["cap_w"], logb, keep, stats)
            out_pos.append(keep.astype(np.float32))
            out_chain.append(np.full(cfg.n_keep, c))
            out_sweep.append(np.arange(cfg.n_keep))
            diag["chains"].append({"seed": s, "mode": "iid", "draws": int(stats[0]),
                                   "proposals": int(stats[1]), "bound_violations": int(stats[2]),
                                   "acceptance": float(stats[0] / max(stats[1], 1))})
    else:
        for c, s in enumerate(seeds):
            s_init, s_tune, s_run = _derive_seeds(s, 3)
            pos0 = _initial_positions(model, comp, s_init)
            if cfg.proposal_scale is None:
                sigma, pos0 = tune_scale(model, comp, s_tune, pos0, cfg)
            else:
                sigma = cfg.proposal_scale
            pos, keep, st = _run_one(model, comp, s_run, pos0, sigma, cfg, cfg.burn_in,
                                     cfg.n_keep, cfg.thin)
            out_pos.append(keep.astype(np.float32))
            out_chain.append(np.full(cfg.n_keep, c))
            out_sweep.append(cfg.burn_in + cfg.thin * (np.arange(cfg.n_keep) + 1) - 1)
            nprop = st[1] + st[3]
            obs = keep[:, :, 2].mean(axis=1)
            diag["chains"].append({
                "seed": s, "mode": "mh", "proposal_scale": sigma,
                "acceptance": float((st[0] + st[2]) / max(nprop, 1)),
                "acceptance_local": float(st[0] / max(st[1], 1)),
                "acceptance_global": float(st[2] / max(st[3], 1)),
                "guard_rate": float(st[4] / max(nprop, 1)),
                "max_inverse_error": float(st[5]), "max_logdet_drift": float(st[6]),
                "rebuilds": int(st[8]), "ess_mean_height": effective_sample_size(obs)})
    ss = SampleSet(np.concatenate(out_pos), np.concatenate(out_chain), np.concatenate(out_sweep), diag)
    ch = diag["chains"]
    diag["acceptance"] = float(np.mean([c["acceptance"] for c in ch]))
    diag["guard_rate"] = float(np.mean([c.get("guard_rate", 0.0) for c in ch]))
    diag["ess"] = {"mean_height": float(sum(c.get("ess_mean_height", c.get("draws", 0) / max(model.N, 1))
                                            for c in ch))}
    return ss


def effective_sample_size(x):
    """Geyer initial-positive-sequence ESS of a scalar chain."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.var(x) == 0:
        return float(n)
    y = x - x.mean()
    f = np.fft.rfft(y, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * np.var(x))
    s = 0.0
    for t in range(0, n - 1, 2):
        pair = acf[t] + acf[t + 1]
        if pair <= 0:
            break
        s += pair
    tau = max(2 * s - 1, 1e-12)
    return float(n / tau)


# ---------------------------------------------------------------- estimators

@dataclass
class EmpiricalDensity:
    grid: SphereGrid
    counts: np.ndarray
    total: int

    @property
    def masses(self):
        return self.counts / self.total

    def to_csv(self, path, header_extra=None):
        with open(path, "w") as fh:
            if header_extra:
                fh.write(f"# {header_extra}\n")
            fh.write("cell_id,center_theta,center_phi,mass\n")
            for i in range(self.grid.n):
                fh.write(f"{i},{self.grid.center_theta[i]:.12e},{self.grid.center_phi[i]:.12e},"
                         f"{self.masses[i]:.12e}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            body = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
        rows = np.loadtxt(body[1:], delimiter=",", ndmin=2)
        n = rows.shape[0]
        m = int(round(np.sqrt(n / 2)))
        return cls(SphereGrid(m, "equal_area"), rows[:, 3], 1)


def estimate_one_point_density(samples, m=32):
    if samples.n_samples == 0:
        raise ValueError("empty sample set")
    g = SphereGrid(m, "equal_area")
    idx = g.locate(samples.points())
    counts = np.bincount(idx, minlength=g.n).astype(float)
    return EmpiricalDensity(g, counts, int(counts.sum()))


def histogram(points, m=32):
    g = SphereGrid(m, "equal_area")
    counts = np.bincount(g.locate(points), minlength=g.n).astype(float)
    return EmpiricalDensity(g, counts, int(counts.sum()))


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def smooth_density(masses, grid, bandwidth):
    """Spherical Gaussian smoothing of cell masses; bandwidth in radians."""
    if bandwidth <= 0:
        return np.asarray(masses, dtype=float)
    X = grid.centers
    out = np.zeros(grid.n)
    dens = masses / grid.areas
    for s in range(0, grid.n, 512):
        cosg = np.clip(X[s:s + 512] @ X.T, -1, 1)
        K = np.exp((cosg - 1.0) / bandwidth ** 2) * grid.areas[None, :]
        out[s:s + 512] = (K @ dens) / K.sum(axis=1)
    return out * grid.areas


def estimate_canonical_current(density, mu0=None, beta=1.0, V=1.0, bandwidth=None, m0=None):
    """Curvature density (w.r.t. omega, total mass V) of theta + dd^c u_k with
    u_k = (1/beta) log(d nu / d mu0), nu the one-point density.  beta = -1
    gives the sign-flipped Fano formula."""
    grid = density.grid
    if bandwidth is None:
        bandwidth = 2.0 * np.sqrt(4 * np.pi / grid.n)
    sm = smooth_density(density.masses, grid, bandwidth)
    if np.any(sm <= 0):
        raise NonPositiveDensity("smoothed density vanishes somewhere")
    if m0 is None:
        from .oracle import mu0_masses
        m0 = grid.areas if mu0 is None else mu0_masses(grid, mu0)
    u = np.log(sm / m0) / beta
    L = grid.laplacian()
    return (V * grid.areas + L @ u) / grid.areas


def mean_energy_product(mu, basis, k, n_mc, seed=0, batch=20000, weight=None):
    """Monte Carlo estimate of (1/N) E_{mu^N}[H] with H = -(1/k) log ||det S||^2.

    ``mu`` is a DensityField (piecewise constant density) or a callable
    sampler rng, n -> (n, 3).  Returns (estimate, stderr)."""
    rng = np.random.default_rng(seed)
    N = basis.N
    vals = []
    left = n_mc
    while left > 0:
        b = min(batch, left)
        if callable(mu):
            X = mu(rng, b * N).reshape(b, N, 3)
        else:
            p = mu.masses / mu.masses.sum()
            cells = rng.choice(len(p), size=b * N, p=p)
            X = mu.grid.sample_uniform_in_cells(cells, rng).reshape(b, N, 3)
        ld = log_det_slater_batch(basis, X, weight)
        vals.append(-ld / (k * N))
        left -= b
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def rotate_points(X, axis, angle):
    """Rotate unit vectors about an axis (Rodrigues)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    X = np.asarray(X, dtype=float)
    return (X * c + np.cross(axis, X) * s + np.outer(X @ axis, axis) * (1 - c))


# ---------------------------------------------------------------- discrete toy

OCTAHEDRON = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)


def exact_chordal2(p, q):
    """Squared chordal distance |p - q|^2 / 4 as a Fraction (integer coordinates)."""
    from fractions import Fraction
    return sum((Fraction(int(a)) - Fraction(int(b))) ** 2 for a, b in zip(p, q)) / 4


def toy_weights(points=OCTAHEDRON, beta=1, k=1):
    """Exact unnormalised Gibbs weights for N = 2 particles restricted to
    ``points`` with the FS-orthonormal basis of O(1) (||det||^2 = 4 s) and
    the normalised counting measure.  beta / k must be an integer."""
    from fractions import Fraction
    K = len(points)
    if Fraction(beta, k).denominator != 1:
        raise ValueError("beta / k must be an integer for rational weights")
    e = beta // k
    out = {}
    for i in range(K):
        for j in range(K):
            d2 = 4 * exact_chordal2(points[i], points[j])
            out[(i, j)] = d2 ** e if d2 != 0 else Fraction(0)
    return out


def toy_transition_matrix(weights, K, N=2):
    """Exact MH transition matrix on positions^N: pick a site uniformly,
    propose one of the K positions uniformly, accept min(1, pi'/pi).
    Returns (states, T) with T a dict of dicts of Fractions."""
    from fractions import Fraction
    states = [s for s in weights if weights[s] != 0]
    T = {}
    for s in states:
        row = {}
        stay = Fraction(1)
        for site in range(N):
            for p in range(K):
                t = list(s)
                t[site] = p
                t = tuple(t)
                if t == s:
                    continue
                pt = weights.get(t, Fraction(0))
                acc = min(Fraction(1), pt / weights[s])
                q = Fraction(1, N * K) * acc
                if q:
                    row[t] = row.get(t, Fraction(0)) + q
                    stay -= q
        row[s] = row.get(s, Fraction(0)) + stay
        T[s] = row
    return states, T


def detailed_balance_exact(weights, T):
    """True iff pi_s T[s][t] == pi_t T[t][s] for every pair (exact)."""
    for s, row in T.items():
        for t, v in row.items():
            if weights[s] * v != weights[t] * T[t].get(s, 0):
                return False
    return True


@njit(cache=True)
def _toy_kernel(seed, P, idx, n_steps, coeffs, d, alpha, counts):
    np.random.seed(seed)
    N = idx.shape[0]
    K = P.shape[0]
    pos = np.empty((N, 3))
    for j in range(N):
        pos[j] = P[idx[j]]
    A = np.zeros((N, N), dtype=np.complex128)
    _build(pos, coeffs, d, A)
    Ainv = np.linalg.inv(A)
    lam = np.zeros(N)
    row = np.empty(N, dtype=np.complex128)
    tmp = np.empty(N, dtype=np.complex128)
    for t in range(n_steps):
        i = np.random.randint(N)
        p = np.random.randint(K)
        code, lr = _mh_core(pos, A, Ainv, lam, i, P[p], 0.0, alpha, 0.0,
                            np.log(np.random.random()), 0.0, row, tmp, coeffs, d)
        if code == 1:
            idx[i] = p
        if (t + 1) % 1000 == 0:
            _build(pos, coeffs, d, A)
            Ainv[:, :] = np.linalg.inv(A)
        s = 0
        for j in range(N):
            s = s * K + idx[j]
        counts[s] += 1


def toy_chain(points=OCTAHEDRON, beta=1.0, k=1, n_steps=10 ** 6, seed=0, start=(0, 1), n_batches=50):
    """Run the MH kernel on the discrete toy space; returns (occupation
    frequencies over the K^2 states, batch-means standard errors)."""
    from .geometry import fs_orthonormal_basis
    basis = fs_orthonormal_basis(1)
    K = len(points)
    P = np.ascontiguousarray(np.asarray(points, dtype=float))
    idx = np.array(start, dtype=np.int64)
    per = n_steps // n_batches
    freqs = []
    s = _derive_seeds(seed, n_batches)
    for b in range(n_batches):
        counts = np.zeros(K ** 2)
        _toy_kernel(s[b], P, idx, per, basis.coeffs, 1, beta / k, counts)
        freqs.append(counts / per)
    freqs = np.array(freqs)
    return freqs.mean(axis=0), freqs.std(axis=0, ddof=1) / np.sqrt(n_batches)


# ---------------------------------------------------------------- diagnostics

def _cap_points(center, radius, n, rng):
    """Uniform (area) points in the chordal cap |x - center| <= radius."""
    center = np.asarray(center, dtype=float)
    e1, e2 = _frame(center)
    smax = (radius / 2.0) ** 2
    s = smax * rng.random(n)
    cg, sg = 1 - 2 * s, 2 * np.sqrt(s * (1 - s))
    ang = 2 * np.pi * rng.random(n)
    return cg[:, None] * center + sg[:, None] * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)


def submean_diagnostic(basis, k, beta=1.0, delta=0.2, n_centers=20, n_inner=4000, seed=0):
    """For random centre configurations compare the sup of ||det||^(beta/k)
    over the delta^2 polyball with its mean over the delta polyball.
    Returns dict with per-centre log ratios and the fitted constant
    C = max log(ratio) / (N delta)."""
    rng = np.random.default_rng(seed)
    N = basis.N
    logs = []
    for _ in range(n_centers):
        X = rng.normal(size=(N, 3))
        X /= np.linalg.norm(X, axis=1)[:, None]
        big = np.stack([_cap_points(X[j], delta, n_inner, rng) for j in range(N)], axis=1)
        small = np.stack([_cap_points(X[j], delta ** 2, n_inner, rng) for j in range(N)], axis=1)
        small = np.concatenate([X[None], small])
        lb = 0.5 * beta / k * log_det_slater_batch(basis, big)
        ls = 0.5 * beta / k * log_det_slater_batch(basis, small)
        mb = lb.max()
        log_avg = mb + np.log(np.mean(np.exp(lb - mb)))
        logs.append(float(ls.max() - log_avg))
    logs = np.array(logs)
    return {"N": N, "k": k, "delta": delta, "log_ratios": logs,
            "fitted_C": float(max(logs.max(), 0.0) / (N * delta))}


def mean_energy_product_quadrature(mu, basis, k, n_self=32, seed=0):
    """(1/2) int H d(mu x mu) for N = 2 by cell-pair quadrature; the
    diagonal cells use random point pairs inside the cell."""
    if basis.N != 2:
        raise ValueError("quadrature route is for N = 2")
    g = mu.grid
    m = mu.masses / mu.masses.sum()
    R = np.empty((g.n, 2), dtype=complex)
    row = np.empty(2, dtype=complex)
    for i, x in enumerate(g.centers):
        _rows(x, basis.coeffs, basis.degree, row)
        R[i] = row
    tot = 0.0
    for s in range(0, g.n, 1024):
        det = R[s:s + 1024, 0][:, None] * R[None, :, 1] - R[s:s + 1024, 1][:, None] * R[None, :, 0]
        with np.errstate(divide="ignore"):
            L = np.log(np.abs(det) ** 2)
        blk = np.arange(s, min(s + 1024, g.n))
        L[np.arange(len(blk)), blk] = 0.0
        tot += float(m[s:s + 1024] @ L @ m)
    rng = np.random.default_rng(seed)
    cells = np.repeat(np.arange(g.n), n_self)
    a = g.sample_uniform_in_cells(cells, rng)
    b = g.sample_uniform_in_cells(cells, rng)
    ld = log_det_slater_batch(basis, np.stack([a, b], axis=1)).reshape(g.n, n_self).mean(axis=1)
    tot += float(np.sum(m ** 2 * ld))
    return -tot / (2.0 * k)


def transformed_pair(weight, mu0, psi, k):
    """(weight + k psi, e^{psi} mu0): at beta = 1 the Gibbs density is
    unchanged (the psi factors cancel)."""
    old = weight.perturbation
    pert = (lambda x: k * np.asarray(psi(x))) if old is None else \
        (lambda x: old(x) + k * np.asarray(psi(x)))
    return WeightSpec(weight.degree, pert, weight.singular, weight.singular_amplitude), \
        mu0.with_log_density(psi)
