"""Partition functions, their large-N asymptotics, Gibbs stability and the
height-type invariant.

Exponent convention: every integrand is ||det S||^(2 beta / k) times the
one-particle factors, so beta = -1 is the Fano case.
"""
from dataclasses import dataclass, field, asdict
from fractions import Fraction
import json
import math
import warnings

import numpy as np
from numba import njit
from scipy import stats
from scipy.special import gammaln

from .errors import EmptySpace
from .geometry import (BackgroundMeasure, Divisor, SectionBasis, WeightSpec, as_xyz, cusp_basis,
                       fs_measure, fs_orthonormal_basis, gram_matrix, klt_measure, log_det_slater_batch,
                       monomial_basis, orthonormalize, xyz_from_z, z_from_xyz)
from .oracle import DensityField, free_energy, functional_F, solve_ma
from .quadrature import QuadratureSpec, SphereGrid, cell_integrals
from .sampler import (GibbsModel, OCTAHEDRON, _derive_seeds, _iid_kernel, _rows, exact_chordal2,
                      rejection_log_bound)

RATIO_THRESHOLD = 1.5
RATIO_RUN = 3
FINITE_TOL = 0.02


# ---------------------------------------------------------------- results

@dataclass
class PartitionResult:
    value: float                  # Z (nan when divergent or not estimated)
    log_value: float
    verdict: str                  # 'finite' | 'DIVERGENT' | 'inconclusive'
    method: str
    stderr: float = float("nan")
    trace: list = field(default_factory=list)   # dicts: level, estimate, ratio
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def divergent(self):
        return self.verdict == "DIVERGENT"

    def to_json(self, config_hash=None):
        d = asdict(self)
        for key in ("value", "log_value", "stderr"):
            if not np.isfinite(d[key]):
                d[key] = None if np.isnan(d[key]) else ("inf" if d[key] > 0 else "-inf")
        if self.divergent:
            d["value"] = "DIVERGENT"
        if config_hash:
            d["config_hash"] = config_hash
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)

    def trace_csv(self, path, header_extra=None):
        with open(path, "w") as fh:
            if header_extra:
                fh.write(f"# {header_extra}\n")
            fh.write("level,estimate,ratio\n")
            for row in self.trace:
                r = row.get("ratio")
                fh.write(f"{row['level']},{row['estimate']:.12e},{'' if r is None else f'{r:.12e}'}\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return str(o)
    return str(o)


def ratio_verdict(estimates, threshold=RATIO_THRESHOLD, run=RATIO_RUN, tol=FINITE_TOL):
    """DIVERGENT when successive ratios exceed ``threshold`` on ``run``
    consecutive levels; finite when the last ratio is within ``tol`` of 1."""
    est = np.asarray(estimates, dtype=float)
    if np.any(np.isinf(est)):
        return "DIVERGENT"
    if len(est) < 2:
        return "inconclusive"
    with np.errstate(divide="ignore", invalid="ignore"):
        r = est[1:] / est[:-1]
    streak = 0
    for x in r:
        streak = streak + 1 if x > threshold else 0
        if streak >= run:
            return "DIVERGENT"
    if abs(r[-1] - 1.0) < tol:
        return "finite"
    return "inconclusive"


def _trace(levels, est):
    out = []
    for i, (l, e) in enumerate(zip(levels, est)):
        out.append({"level": int(l), "estimate": float(e),
                    "ratio": None if i == 0 else float(e / est[i - 1])})
    return out


# ---------------------------------------------------------------- helpers

def _model(N, k, beta, basis, w, mu0, u=None):
    if basis.N != N:
        raise ValueError(f"N={N} but the basis has {basis.N} sections")
    return GibbsModel(basis, k, beta, w, mu0, tilt=u)


def _log_extra(model, xyz):
    """Non-mu0 one-particle log factors: -alpha v - beta u."""
    out = np.zeros(len(xyz))
    if model.alpha != 0 and not model.weight.is_fs():
        out = out - model.alpha * model.weight.extra(xyz)
    if model.tilt is not None:
        out = out - model.beta * np.asarray(model.tilt(xyz), dtype=float)
    return out


def one_particle_masses(model, grid, quad=QuadratureSpec()):
    """Cell integrals of the full one-particle factor (mu0, weight, tilt)."""
    spec = QuadratureSpec(m=grid.m, order=quad.order, max_depth=quad.max_depth, near=quad.near)

    def f(x):
        v = np.exp(model.log_one(x))
        return np.where(np.isfinite(v), v, 0.0)
    return np.asarray(cell_integrals(grid, f, model.singularities(), spec), dtype=float)


def _grid_rows(basis, xyz):
    R = np.empty((len(xyz), basis.N), dtype=complex)
    row = np.empty(basis.N, dtype=complex)
    for i, x in enumerate(xyz):
        _rows(x, basis.coeffs, basis.degree, row)
        R[i] = row
    return R


@njit(cache=True)
def _tensor1(R, M, two_alpha):
    tot = 0.0
    for i in range(R.shape[0]):
        a = abs(R[i, 0])
        if a == 0.0:
            if two_alpha < 0:
                return np.inf
            continue
        tot += M[i] * np.exp(two_alpha * np.log(a))
    return tot


@njit(cache=True)
def _tensor2(R, M, two_alpha):
    n = R.shape[0]
    tot = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            a = abs(R[i, 0] * R[j, 1] - R[i, 1] * R[j, 0])
            if a == 0.0:
                if two_alpha < 0:
                    return np.inf
                continue
            tot += M[i] * M[j] * np.exp(two_alpha * np.log(a))
    return 2.0 * tot


@njit(cache=True)
def _tensor3(R, M, two_alpha):
    n = R.shape[0]
    tot = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            c0 = R[i, 1] * R[j, 2] - R[i, 2] * R[j, 1]
            c1 = R[i, 2] * R[j, 0] - R[i, 0] * R[j, 2]
            c2 = R[i, 0] * R[j, 1] - R[i, 1] * R[j, 0]
            mij = M[i] * M[j]
            for l in range(j + 1, n):
                a = abs(R[l, 0] * c0 + R[l, 1] * c1 + R[l, 2] * c2)
                if a == 0.0:
                    if two_alpha < 0:
                        return np.inf
                    continue
                tot += mij * M[l] * np.exp(two_alpha * np.log(a))
    return 6.0 * tot


_TENSOR = {1: _tensor1, 2: _tensor2, 3: _tensor3}
DEFAULT_LEVELS = {1: (8, 16, 32, 64), 2: (4, 8, 16, 32), 3: (2, 4, 8, 16)}


# ---------------------------------------------------------------- stable determinants near collisions

def log_det_divided(basis, z):
    """log|det [s_n(z_i)]| (flat chart, no weight) via Newton divided
    differences: Vandermonde(z) times det of the divided-difference matrix.
    z: (M, N) complex array in one chart.  Accurate for clustered nodes."""
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    M, N = z.shape
    P = np.broadcast_to(basis.coeffs.T[None], (M, basis.degree + 1, N)).copy()  # coefficient i, section n
    D = np.empty((M, N, N), dtype=complex)
    for l in range(N):
        # evaluate current quotient polynomials at z_l (Horner), then divide by (x - z_l)
        zl = z[:, l][:, None]
        deg = P.shape[1] - 1
        q = np.zeros((M, max(deg, 1), N), dtype=complex)
        acc = P[:, deg, :].copy()
        for i in range(deg - 1, -1, -1):
            if deg > 0:
                q[:, i, :] = acc
            acc = acc * zl + P[:, i, :]
        D[:, l, :] = acc
        P = q if deg > 0 else np.zeros((M, 1, N), dtype=complex)
    _, ld = np.linalg.slogdet(D)
    iu = np.triu_indices(N, 1)
    diff = np.abs(z[:, iu[1]] - z[:, iu[0]])
    with np.errstate(divide="ignore"):
        lv = np.log(diff).sum(axis=1) if N > 1 else np.zeros(M)
    return lv + ld


def _log_density_clustered(model, z, north=True):
    """log target at chart configurations (M, N): det part computed stably."""
    M, N = z.shape
    xyz = xyz_from_z(z.reshape(-1)).reshape(M, N, 3) if north else _south_xyz(z)
    ld_flat = log_det_divided(model.basis if north else _reversed_basis(model.basis), z)
    fs = -0.5 * model.basis.degree * np.log1p(np.abs(z) ** 2).sum(axis=1)
    ld = 2.0 * (ld_flat + fs)
    one = model.log_one(xyz.reshape(-1, 3)).reshape(M, N).sum(axis=1)
    return model.alpha * ld + one if model.alpha != 0 else one


def _south_xyz(w):
    # w = (X - iY)/(1 - Z)
    r2 = np.abs(w) ** 2
    X = 2 * w.real / (1 + r2)
    Y = -2 * w.imag / (1 + r2)
    Z = (r2 - 1) / (1 + r2)
    return np.stack([X, Y, Z], axis=-1)


def _reversed_basis(basis):
    return SectionBasis(basis.degree, basis.coeffs[:, ::-1].copy())


def _chart_of(p):
    p = np.asarray(p, dtype=float)
    if p[2] >= 0:
        return True, complex(p[0], p[1]) / (1 + p[2])
    return False, complex(p[0], -p[1]) / (1 - p[2])


def _spread_points(n, avoid, near=None):
    """Deterministic well separated points away from ``avoid`` (and in the
    hemisphere around ``near`` when given)."""
    out = []
    i = 0
    golden = np.pi * (3 - np.sqrt(5))
    total = 4 * n + 8
    while len(out) < n:
        zc = 1 - (i + 0.5) * 2 / total
        r = np.sqrt(1 - zc * zc)
        p = np.array([r * np.cos(golden * i + 0.3), r * np.sin(golden * i + 0.3), zc])
        i += 1
        ok_near = near is None or np.sum((p - near) ** 2) / 4 < 0.6
        if ok_near and all(np.sum((p - a) ** 2) / 4 > 0.15 for a in avoid) and \
                all(np.sum((p - q) ** 2) / 4 > 0.02 for q in out):
            out.append(p)
        if i > 100 * total:
            raise RuntimeError("could not place spread points")
    return np.array(out).reshape(-1, 3)


def _shape_directions(m, n_dir, seed=0):
    """Unit vectors of C^m with zero mean (collision shapes), deterministic."""
    sob = stats.qmc.Sobol(2 * m, scramble=True, seed=seed)
    u = sob.random(n_dir)
    g = stats.norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    xi = g[:, :m] + 1j * g[:, m:]
    xi = xi - xi.mean(axis=1, keepdims=True)
    return xi / np.linalg.norm(xi, axis=1, keepdims=True)


def collision_shells(model, m, center, levels=6, r0=0.25, n_dir=512, n_nodes=4, onto_point=False):
    """Contributions of dyadic shells r in [r0 2^-(j+1), r0 2^-j] around an
    m-point collision at ``center`` (other particles fixed at spread points).

    With ``onto_point`` the m points converge onto the center itself (used
    at divisor points), otherwise they cluster around their own barycentre.
    Returns cumulative estimates (one per level)."""
    N = model.N
    north, c = _chart_of(center)
    center = np.asarray(center, dtype=float)
    others = _spread_points(N - m, [center], near=center)
    if north:
        oz = (others[:, 0] + 1j * others[:, 1]) / (1 + others[:, 2])
    else:
        oz = (others[:, 0] - 1j * others[:, 1]) / (1 - others[:, 2])
    if onto_point:
        sob = stats.qmc.Sobol(2 * m, scramble=True, seed=1)
        g = stats.norm.ppf(np.clip(sob.random(n_dir), 1e-12, 1 - 1e-12))
        xi = g[:, :m] + 1j * g[:, m:]
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
        dim = 2 * m
    else:
        xi = _shape_directions(m, n_dir)
        dim = 2 * m - 2
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    est, total = [], 0.0
    for j in range(levels):
        a, b = np.log(r0) - (j + 1) * np.log(2), np.log(r0) - j * np.log(2)
        shell = 0.0
        for tt, ww in zip(t, w):
            lr = 0.5 * (a + b) + 0.5 * (b - a) * tt
            r = np.exp(lr)
            z = np.empty((n_dir, N), dtype=complex)
            z[:, :m] = c + r * xi
            z[:, m:] = oz[None, :]
            ld = _log_density_clustered(model, z, north)
            val = np.exp(ld + dim * lr)
            val = np.where(np.isnan(val), 0.0, val)
            shell += 0.5 * (b - a) * ww * val.mean()
        total += shell
        est.append(total)
    return np.array(est)


# ---------------------------------------------------------------- partition functions

def z_exact(N, k, beta, basis, w=None, mu0=None, quad=QuadratureSpec(), u=None, levels=None,
            mc_samples=100000, seed=0):
    """Deterministic Z_{N, beta} with a refinement trace.

    N <= 3: tensor midpoint sums over equal-area cells (coincident cells
    dropped) at successively finer meshes.  N > 3: the divergence test runs
    on collision-scale shells (all m-point collision strata at a generic
    point and at the singular points of mu0); a finite value is then
    estimated by z_mc with a fixed seed.
    """
    w = WeightSpec(basis.degree) if w is None else w
    mu0 = fs_measure() if mu0 is None else mu0
    model = _model(N, k, beta, basis, w, mu0, u)
    if beta == 0 and u is None:
        mass = mu0.total_mass(quad)
        val = mass ** N
        return PartitionResult(val, N * math.log(mass), "finite", "closed-form",
                               trace=_trace([0], [val]), meta={"N": N, "k": k, "beta": 0.0})
    if N <= 3:
        levels = DEFAULT_LEVELS[N] if levels is None else levels
        est = []
        for m in levels:
            g = SphereGrid(m, "equal_area")
            M = one_particle_masses(model, g, quad)
            R = _grid_rows(basis, g.centers)
            est.append(float(_TENSOR[N](R, M, 2.0 * model.alpha)))
        verdict = ratio_verdict(est)
        trace, method = _trace(levels, est), "tensor-quadrature"
        meta = {"N": N, "k": k, "beta": beta}
        if verdict == "inconclusive" or (verdict == "finite" and model.alpha < 0):
            # slow midpoint convergence for singular integrands: let the
            # collision-scale test decide finiteness
            cv, ctrace, strata = collision_verdict(model)
            meta["strata"] = strata
            meta["tensor_verdict"] = verdict
            if cv != "inconclusive" and cv != verdict:
                verdict, trace, method = cv, ctrace, "tensor-quadrature+collision-shells"
        val = est[-1] if verdict != "DIVERGENT" else float("nan")
        logv = math.log(val) if np.isfinite(val) and val > 0 else float("nan")
        return PartitionResult(val, logv, verdict, method, trace=trace, meta=meta)
    verdict, trace, strata = collision_verdict(model)
    res = PartitionResult(float("nan"), float("nan"), verdict, "collision-shells", trace=trace,
                          meta={"N": N, "k": k, "beta": beta, "strata": strata})
    if verdict != "DIVERGENT":
        mc = z_mc(N, k, beta, basis, w, mu0, mc_samples, seed, u=u)
        res.value, res.log_value, res.stderr = mc.value, mc.log_value, mc.stderr
        res.warnings += mc.warnings
    return res


def collision_verdict(model, levels=6, n_dir=512):
    """Ratio test on every collision stratum; the worst trace is returned."""
    N = model.N
    strata = []
    generic = xyz_from_z(np.array([0.31 + 0.17j]))[0]
    for m in range(2, N + 1):
        est = collision_shells(model, m, generic, levels, n_dir=n_dir)
        strata.append({"m": m, "center": "generic", "verdict": ratio_verdict(est), "estimates": est})
    for sg in model.singularities():
        for m in range(1, N + 1):
            est = collision_shells(model, m, sg.point, levels, n_dir=n_dir, onto_point=True)
            strata.append({"m": m, "center": tuple(np.round(sg.point, 12)), "verdict": ratio_verdict(est),
                           "estimates": est})
    verdicts = [s["verdict"] for s in strata]
    if "DIVERGENT" in verdicts:
        verdict = "DIVERGENT"
        worst = next(s for s in strata if s["verdict"] == "DIVERGENT")
    elif all(v == "finite" for v in verdicts):
        verdict = "finite"
        worst = strata[-1]
    else:
        verdict = "inconclusive"
        worst = next(s for s in strata if s["verdict"] == "inconclusive")
    trace = _trace(range(levels), worst["estimates"])
    summary = [{"m": s["m"], "center": s["center"], "verdict": s["verdict"]} for s in strata]
    return verdict, trace, summary


def sample_mu0(mu0, n, seed=0, N=1):
    """Exact i.i.d. draws from mu0 / mu0(X): array (n, N, 3)."""
    if not mu0.is_finite():
        raise ValueError("cannot sample an infinite measure")
    m0 = GibbsModel(fs_orthonormal_basis(0), 1, 0.0, WeightSpec(0), mu0)
    comp = m0.compile()
    logb = rejection_log_bound(m0, comp)
    out = np.zeros((n, N, 3))
    st = np.zeros(3)
    _iid_kernel(_derive_seeds(seed, 1)[0], n, N, comp["sp_xyz"], comp["sp_c"], comp["sp_q"],
                comp["table"], comp["has_field"], comp["w0"], comp["cap_xyz"], comp["cap_c"],
                comp["cap_kind"], comp["cap_w"], logb, out, st)
    if st[2]:
        warnings.warn("rejection bound exceeded; mu0 draws are approximate")
    return out


def z_mc(N, k, beta, basis, w=None, mu0=None, n_samples=100000, seed=0, u=None, batch=50000,
         return_weights=False):
    """Importance sampling from mu0^N: Z = mu0(X)^N E[||det||^(2 beta/k) e^(...)]."""
    w = WeightSpec(basis.degree) if w is None else w
    mu0 = fs_measure() if mu0 is None else mu0
    model = _model(N, k, beta, basis, w, mu0, u)
    mass = mu0.total_mass()
    logw = []
    seeds = _derive_seeds(seed, (n_samples + batch - 1) // batch)
    left = n_samples
    for s in seeds:
        b = min(batch, left)
        X = sample_mu0(mu0, b, s, N)
        lw = np.zeros(b)
        if model.alpha != 0:
            lw = lw + model.alpha * log_det_slater_batch(basis, X, None)
        lw = lw + _log_extra(model, X.reshape(-1, 3)).reshape(b, N).sum(axis=1)
        logw.append(lw)
        left -= b
    logw = np.concatenate(logw)
    return _mc_result(logw, N * math.log(mass), N, k, beta, return_weights)


def _mc_result(logw, log_scale, N, k, beta, return_weights=False):
    warn = []
    if np.any(np.isposinf(logw)):
        warn.append("infinite weights encountered")
        res = PartitionResult(float("inf"), float("inf"), "DIVERGENT", "monte-carlo", warnings=warn,
                              meta={"N": N, "k": k, "beta": beta, "n": len(logw)})
        return res
    mx = logw.max()
    ew = np.exp(logw - mx)
    mean = ew.mean()
    sd = ew.std(ddof=1) / np.sqrt(len(ew)) if len(ew) > 1 else float("nan")
    srt = np.sort(ew)[::-1]
    top = srt[:max(1, len(ew) // 100)].sum() / srt.sum()
    if top > 0.5:
        warn.append(f"heavy tail: top 1% of weights carry {top:.2f} of the sum")
        warnings.warn(warn[-1])
    logz = log_scale + mx + math.log(mean)
    z = math.exp(logz) if logz < 700 else float("inf")
    res = PartitionResult(z, logz, "finite" if not warn else "inconclusive", "monte-carlo",
                          stderr=z * sd / mean if np.isfinite(z) else float("nan"), warnings=warn,
                          meta={"N": N, "k": k, "beta": beta, "n": len(logw), "top1_share": float(top),
                                "log_stderr": float(sd / mean)})
    if return_weights:
        res.meta["logw"] = logw
    return res


# ---------------------------------------------------------------- free energy asymptotics

@dataclass
class PairData:
    """(O(d), mu0) family with d = V k, FS reference weight and basis."""
    mu0: BackgroundMeasure = None
    V: Fraction = Fraction(1)
    name: str = "fs"

    def __post_init__(self):
        self.mu0 = fs_measure() if self.mu0 is None else self.mu0
        self.V = Fraction(self.V).limit_denominator(1000)

    def degree(self, k):
        d = self.V * k
        if d.denominator != 1:
            raise ValueError(f"level k={k} gives non-integral degree {d}")
        return int(d)

    def level(self, k):
        d = self.degree(k)
        return fs_orthonormal_basis(d), WeightSpec(d), self.mu0

    def inf_free_energy(self, beta, m=64):
        """Oracle inf F_beta = F_beta(MA(u_beta))."""
        if self.mu0.kind == "smooth" and self.mu0.log_density is None:
            # FS data: mu_beta is the normalised area form; only the mass shift remains
            return 0.0 - math.log(self.mu0.scale) / beta
        k0, d0 = self.V.denominator, self.V.numerator
        pf = solve_ma(beta, self.mu0, WeightSpec(d0), k0, SphereGrid(m))
        mu = DensityField(pf.grid, pf.ma_masses() / pf.ma_masses().sum())
        return float(free_energy(mu, self.mu0, beta, float(self.V)))


def asymptotic_free_energy_check(k_range, beta, data=None, n_samples=100000, seed=0, tol=0.05):
    """-(1/(beta N_k)) log Z_{N_k, beta} by Monte Carlo against inf F_beta."""
    data = PairData() if data is None else data
    if beta <= 0:
        raise ValueError("asymptotic check needs beta > 0")
    target = data.inf_free_energy(beta)
    rows = []
    for i, k in enumerate(k_range):
        basis, w, mu0 = data.level(k)
        N = basis.N
        res = z_mc(N, k, beta, basis, w, mu0, n_samples, seed + 1000 * i)
        val = -res.log_value / (beta * N)
        err = res.meta.get("log_stderr", float("nan")) / (beta * N)
        rows.append({"k": k, "N": N, "value": val, "stderr": err, "oracle": target,
                     "gap": abs(val - target)})
    gaps = [r["gap"] for r in rows]
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    return {"rows": rows, "oracle": target, "decreasing": decreasing, "final_gap": gaps[-1],
            "passed": bool(decreasing and gaps[-1] < tol)}


# ---------------------------------------------------------------- cusp L2 functional

def l2_cusp_functional(k, u=None, v=None, D=None, d=3, grid=None, quad=QuadratureSpec(m=32)):
    """-(1/(k N_k)) log of the L2 integral of |det S|^2 e^{-k(v+u)} over
    X^{N_k} for the Poincare measure of D, relative to the reference (FS
    weight and area); by the Andreief identity this equals
    -(1/(k N)) [log det G - log det G_ref] for the cusp basis of O(dk).

    v: amplitude a of the log-log weight on the lc points of D (float), or
    None for no log-log part.  Returns dict(value, oracle, gap, N)."""
    if D is None:
        raise ValueError("an lc divisor is required")
    lc = Divisor(tuple((p, 1.0) for p, c in D.points if c == 1.0))
    basis = cusp_basis(d * k, lc)
    N = basis.N
    a = 0.0 if v is None else float(v)
    pert = None if u is None else (lambda x, u=u: k * np.asarray(u(x), dtype=float))
    w = WeightSpec(d * k, pert, lc if a != 0 else None, k * a if a != 0 else 1.0)
    mu0 = BackgroundMeasure("poincare", D)
    G = gram_matrix(basis, w, mu0, quad)
    G0 = gram_matrix(basis, WeightSpec(d * k), fs_measure(), quad)
    ld = np.linalg.slogdet(G)[1] - np.linalg.slogdet(G0)[1]
    value = -ld / (k * N)
    grid = SphereGrid(64) if grid is None else grid
    wv = WeightSpec(d, None, lc if a != 0 else None, a if a != 0 else 1.0)
    psi = wv.extra(grid.centers)
    if u is not None:
        psi = psi + np.asarray(u(grid.centers), dtype=float)
    oracle = functional_F(psi, grid, float(d))
    return {"k": k, "N": N, "value": float(value), "oracle": float(oracle),
            "gap": float(abs(value - oracle))}


# ---------------------------------------------------------------- lct

@dataclass
class LctBracket:
    lo: float
    hi: float
    per_stratum: list = field(default_factory=list)

    def entirely_above(self, t=1.0):
        return self.lo > t

    def entirely_below(self, t=1.0):
        return self.hi <= t


def vanishing_order_fit(basis, m, n_shapes=8, radii=None, seed=0, center=None, onto_point=False):
    """Log-log regression of |det S| against the collision scale r for an
    m-point collision.  Returns (mean slope, half-width of the bracket)."""
    N = basis.N
    if not 1 <= m <= N:
        raise ValueError("collision size must be in 1..N")
    radii = np.logspace(-1.5, -4.5, 13) if radii is None else np.asarray(radii)
    rng = np.random.default_rng(seed)
    slopes, widths = [], []
    for s in range(n_shapes):
        c = (0.3 * (rng.random() + 1j * rng.random())) if center is None else center
        xi = rng.normal(size=m) + 1j * rng.normal(size=m)
        if not onto_point:
            xi -= xi.mean()
        xi /= np.linalg.norm(xi)
        others = 1.5 * np.exp(2j * np.pi * (np.arange(N - m) + rng.random()) / max(N - m, 1)) \
            * (1 + 0.3 * rng.random(N - m))
        z = np.empty((len(radii), N), dtype=complex)
        z[:, :m] = c + radii[:, None] * xi[None, :]
        z[:, m:] = others[None, :]
        y = log_det_divided(basis, z)
        x = np.log(radii)
        fit = stats.linregress(x, y)
        slopes.append(fit.slope)
        widths.append(stats.t.ppf(0.995, len(x) - 2) * fit.stderr)
    slopes = np.array(slopes)
    nu = float(slopes.mean())
    half = float(np.abs(slopes - nu).max() + max(widths) + 1e-6 * max(1.0, abs(nu)))
    return nu, half


def lct_estimate(k, basis, m=None, mu0=None, n_shapes=8, seed=0):
    """Bracket on sup{t: |det S|^(-2t/k) locally integrable} near the
    m-point collision strata (all m = 2..N when m is None); klt points of mu0
    add the strata where points collapse onto them."""
    N = basis.N
    ms = range(2, N + 1) if m is None else [m]
    per = []
    for mm in ms:
        nu, half = vanishing_order_fit(basis, mm, n_shapes, seed=seed)
        codim = mm - 1      # complex codimension of the stratum
        lo = k * codim / (nu + half) if nu + half > 0 else np.inf
        hi = k * codim / (nu - half) if nu - half > 0 else np.inf
        per.append({"m": mm, "center": "generic", "order": nu, "order_halfwidth": half, "lo": lo, "hi": hi})
    if mu0 is not None and mu0.divisor is not None:
        for p, a in zip(mu0.divisor.xyz, mu0.divisor.coeffs):
            north, c = _chart_of(p)
            b = basis if north else _reversed_basis(basis)
            for mm in (range(1, N + 1) if m is None else [m]):
                nu, half = vanishing_order_fit(b, mm, n_shapes, seed=seed, center=c, onto_point=True)
                room = mm * (1.0 - a)
                if room <= 0:
                    lo = hi = 0.0
                else:
                    lo = k * room / (nu + half) if nu + half > 0 else np.inf
                    hi = k * room / (nu - half) if nu - half > 0 else np.inf
                per.append({"m": mm, "center": tuple(np.round(p, 12)), "order": nu,
                            "order_halfwidth": half, "lo": lo, "hi": hi})
    lo = min(p["lo"] for p in per)
    hi = min(p["hi"] for p in per)
    return LctBracket(float(lo), float(hi), per)


# ---------------------------------------------------------------- stability

@dataclass
class FanoGeometry:
    """Log Fano pair (P^1, D) with D klt of degree < 2; level k needs
    k (2 - deg D) integral.  Effective exponent on ||det|| is 2 beta / k."""
    divisor: Divisor = None
    name: str = "P1"

    @property
    def V(self):
        deg = 0.0 if self.divisor is None else self.divisor.degree()
        return Fraction(2 - deg).limit_denominator(1000)

    def valid(self, k):
        return (self.V * k).denominator == 1 and self.V * k >= 1

    def mu0(self):
        if self.divisor is None or len(self.divisor) == 0:
            return fs_measure()
        return klt_measure(self.divisor)

    def level(self, k, beta=-1.0):
        d = int(self.V * k)
        basis = monomial_basis(d)
        return basis, WeightSpec(d), self.mu0()


@dataclass
class StabilityReport:
    geometry: str
    verdicts: dict = field(default_factory=dict)        # k -> verdict
    details: dict = field(default_factory=dict)         # k -> dict
    gamma_bounds: tuple = (float("nan"), float("nan"))

    def to_json(self, config_hash=None):
        d = {"geometry": self.geometry, "verdicts": {str(k): v for k, v in self.verdicts.items()},
             "details": {str(k): v for k, v in self.details.items()},
             "gamma_bounds": list(self.gamma_bounds)}
        if config_hash:
            d["config_hash"] = config_hash
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)

    @property
    def any_unstable(self):
        return any(v == "unstable" for v in self.verdicts.values())


def combine_verdicts(z_verdict, bracket, t=1.0):
    """stable needs finite Z and lct bracket > t; unstable needs DIVERGENT or
    bracket <= t; a conflict between the detectors is inconclusive."""
    z_side = {"finite": "stable", "DIVERGENT": "unstable"}.get(z_verdict)
    l_side = "stable" if bracket.entirely_above(t) else ("unstable" if bracket.entirely_below(t) else None)
    if z_side and l_side and z_side != l_side:
        return "inconclusive"
    if "unstable" in (z_side, l_side):
        return "unstable"
    if z_side == "stable" and l_side == "stable":
        return "stable"
    return "inconclusive"


def gibbs_stability_scan(geometry=None, k_max=4, mc_samples=20000, seed=0):
    geometry = FanoGeometry() if geometry is None else geometry
    rep = StabilityReport(geometry.name)
    los, his = [], []
    for k in range(1, k_max + 1):
        if not geometry.valid(k):
            continue
        basis, w, mu0 = geometry.level(k)
        z = z_exact(basis.N, k, -1.0, basis, w, mu0, mc_samples=mc_samples, seed=seed)
        br = lct_estimate(k, basis, mu0=mu0 if mu0.divisor is not None else None)
        v = combine_verdicts(z.verdict, br)
        rep.verdicts[k] = v
        rep.details[k] = {"N": basis.N, "z_verdict": z.verdict, "z_trace": z.trace,
                          "lct": [br.lo, br.hi], "strata": br.per_stratum}
        los.append(br.lo), his.append(br.hi)
    if los:
        rep.gamma_bounds = (float(min(los)), float(his[-1]))
    return rep


def strong_gibbs_check(geometry=None, b_grid=(0.2, 0.4, 0.6, 0.8, 0.95), k_range=(1, 2, 3),
                       mc_samples=20000, seed=0):
    """For each b in the grid the per-k trace of (1/N_k) log Z with
    effective exponent -2b/k on ||det S||; finiteness thresholds in b from
    the divergence test and from the lct brackets are reported together."""
    geometry = FanoGeometry() if geometry is None else geometry
    rows = []
    for b in b_grid:
        trace = []
        for k in k_range:
            if not geometry.valid(k):
                continue
            basis, w, mu0 = geometry.level(k)
            z = z_exact(basis.N, k, -float(b), basis, w, mu0, mc_samples=mc_samples, seed=seed)
            trace.append({"k": k, "N": basis.N, "verdict": z.verdict,
                          "log_z_over_n": (z.log_value / basis.N) if z.verdict != "DIVERGENT" else None})
        div = any(t["verdict"] == "DIVERGENT" for t in trace)
        fin = all(t["verdict"] == "finite" for t in trace)
        rows.append({"b": b, "trace": trace,
                     "verdict": "unbounded" if div else ("bounded" if fin else "inconclusive")})
    finite_b = [r["b"] for r in rows if r["verdict"] == "bounded"]
    div_b = [r["b"] for r in rows if r["verdict"] == "unbounded"]
    z_threshold = (max(finite_b) if finite_b else 0.0, min(div_b) if div_b else float("inf"))
    brackets = []
    for k in k_range:
        if geometry.valid(k):
            basis, w, mu0 = geometry.level(k)
            br = lct_estimate(k, basis, mu0=mu0 if mu0.divisor is not None else None)
            brackets.append((k, br.lo, br.hi))
    lct_threshold = (min(b[1] for b in brackets), min(b[2] for b in brackets))
    # monotonicity: once divergent, stays divergent for larger b
    first_div = next((i for i, r in enumerate(rows) if r["verdict"] == "unbounded"), len(rows))
    monotone = all(r["verdict"] == "unbounded" for r in rows[first_div:])
    return {"geometry": geometry.name, "rows": rows, "z_threshold": z_threshold,
            "lct_brackets": brackets, "lct_threshold": lct_threshold, "monotone": monotone,
            "log_mass": math.log(geometry.mu0().total_mass())}


# ---------------------------------------------------------------- height invariant

def ke_data(pf, mu0, k):
    """Weight k(phi_FS + u) on O(k) and measure e^{u} mu0 for a solved
    field u on O(1) (beta = 1)."""
    interp = lambda x: pf.grid.interpolate(pf.values, x)
    w = WeightSpec(k, lambda x: k * interp(x))
    mu = mu0.with_log_density(interp)
    return w, mu


def height_invariant(k, integral_basis=None, w_ke=None, mu0=None, n_samples=100000, seed=0,
                     quad=QuadratureSpec(m=32)):
    """h_k = -(1/N_k) log Z_{N_k} (beta = 1) with the lattice basis, together
    with the decomposition through a KE-orthonormal basis:

        h_k = -(1/N) log Z_KE - (1/(N k)) log det H,

    H the Gram matrix of the lattice basis for (k phi_KE, e^u mu0).  Both Z
    values use the same sample (or quadrature nodes), so the identity holds
    to rounding."""
    mu0 = fs_measure() if mu0 is None else mu0
    if w_ke is None:
        w_ke = solve_ma(1.0, mu0, WeightSpec(1), 1)
    basis = monomial_basis(k) if integral_basis is None else integral_basis
    N = basis.N
    w, mu = ke_data(w_ke, mu0, k)
    H = gram_matrix(basis, w, mu, quad)
    ke_basis = orthonormalize(basis, H, "ke")
    logdetH = float(np.linalg.slogdet(H)[1])
    if N <= 3:
        zl = z_exact(N, k, 1.0, basis, w, mu, quad)
        zk = z_exact(N, k, 1.0, ke_basis, w, mu, quad)
        log_zl, log_zk = zl.log_value, zk.log_value
        method = "tensor-quadrature"
    else:
        X = sample_mu_tilted(mu, n_samples, seed, N)
        log_zl = _log_z_from_sample(basis, k, w, mu, X)
        log_zk = _log_z_from_sample(ke_basis, k, w, mu, X)
        method = "monte-carlo"
    h = -log_zl / N
    first = -log_zk / N
    second = -logdetH / (N * k)
    return {"k": k, "N": N, "h": h, "first_term": first, "second_term": second,
            "identity_error": abs(h - (first + second)), "log_det_H": logdetH, "method": method}


def sample_mu_tilted(mu, n, seed, N):
    """Exact draws from mu / mu(X) with mu = e^{g} mu0 (rejection)."""
    return sample_mu0(mu, n, seed, N)


def _log_z_from_sample(basis, k, w, mu, X):
    n, N, _ = X.shape
    lw = log_det_slater_batch(basis, X, w) / k
    mass = mu.total_mass()
    mx = lw.max()
    return N * math.log(mass) + mx + math.log(np.mean(np.exp(lw - mx)))


# ---------------------------------------------------------------- Gibbs variational principle (toy)



def gibbs_variational_check(points=OCTAHEDRON, beta=1, k=1, mu0_weights=None, n_random=200, seed=0):
    """Exact check of the Gibbs variational principle for N = 2 on a finite
    state space (points with integer coordinates, full basis of O(1) made
    FS-orthonormal, so ||det||^2 = 4 s exactly).

    Verifies in rational arithmetic that the Gibbs measure G satisfies
    G_s / (mu0_s e^{-beta H_s}) = 1/Z on its support, i.e. the first
    variation of beta F^(N) is constant there (with strict convexity this
    makes G the unique minimiser and beta F^(N)(G) = -(1/N) log Z), and
    checks F(mu) >= F(G) in floating point on random competitors."""
    P = np.asarray(points, dtype=float)
    K = len(P)
    N = 2
    mu0_weights = [Fraction(1, K)] * K if mu0_weights is None else [Fraction(x) for x in mu0_weights]
    basis = fs_orthonormal_basis(1)
    states = [(i, j) for i in range(K) for j in range(K)]
    det2, mu0s = {}, {}
    for (i, j) in states:
        s = exact_chordal2(P[i], P[j])
        exact = 4 * s
        if i != j:
            num = math.exp(log_det_slater_batch(basis, P[[i, j]][None], None)[0])
            if abs(num - float(exact)) > 1e-12:
                raise AssertionError("closed form for ||det||^2 does not match the evaluation")
        det2[(i, j)] = exact
        mu0s[(i, j)] = mu0_weights[i] * mu0_weights[j]
    if (beta * Fraction(1, k)).denominator != 1:
        raise ValueError("beta / k must be an integer for rational weights")
    e = int(beta // k)
    # e^{-beta H} = ||det||^{2 beta / k}
    gw = {s: det2[s] ** e if det2[s] != 0 else Fraction(0) for s in states}
    Z = sum(mu0s[s] * gw[s] for s in states)
    G = {s: mu0s[s] * gw[s] / Z for s in states}
    ratios = {G[s] / (mu0s[s] * gw[s]) for s in states if G[s] != 0}
    stationary = ratios == {1 / Z}
    normalized = sum(G.values()) == 1

    def beta_F(mu):
        # (1/N) [ beta <H, mu> + D(mu | mu0^N) ]
        val = 0.0
        for s, m in mu.items():
            if m == 0:
                continue
            if gw[s] == 0:
                return float("inf")
            val += float(m) * (-math.log(float(gw[s])) + math.log(float(m) / float(mu0s[s])))
        return val / N

    fG = beta_F(G)
    target = -math.log(float(Z)) / N
    rng = np.random.default_rng(seed)
    support = [s for s in states if G[s] != 0]
    worst = float("inf")
    for _ in range(n_random):
        x = rng.dirichlet(np.ones(len(support)))
        mu = {s: x[i] for i, s in enumerate(support)}
        worst = min(worst, beta_F(mu) - fG)
    return {"Z": Z, "gibbs": G, "stationary_exact": stationary, "normalized_exact": normalized,
            "beta_F_gibbs": fG, "minus_log_Z_over_N": target, "min_excess_random": worst,
            "passed": bool(stationary and normalized and abs(fG - target) < 1e-12 and worst > 0)}
