"""Command line front end.

    p1gibbs sample     --config run.yaml [--out DIR] [--seed S]
    p1gibbs oracle     --config run.yaml
    p1gibbs partition  --config run.yaml
    p1gibbs stability  --config run.yaml
    p1gibbs compare    --config run.yaml A.csv B.csv

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence,
4 instability detected.
"""
import argparse
import datetime
import json
import os
import sys

import numpy as np

from .errors import (ConfigError, DivergentIntegral, EmptySpace, GridMismatch, NoConvergence,
                     NonFiniteDensityEverywhere, NotKlt, P1GibbsError)

EXIT_OK, EXIT_CONFIG, EXIT_NOCONV, EXIT_UNSTABLE = 0, 2, 3, 4


# ---------------------------------------------------------------- artifact helpers

def _header(cfg):
    return f"config_hash={cfg.config_hash()} geometry_hash={cfg.geometry_hash()}"


def _write_json(path, obj, cfg):
    obj = dict(obj)
    obj["config_hash"] = cfg.config_hash()
    obj["geometry_hash"] = cfg.geometry_hash()
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_metadata(outdir, cfg, command):
    # timestamps live only here so the other artifacts stay byte-identical
    meta = {"command": command, "config_hash": cfg.config_hash(),
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    with open(os.path.join(outdir, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_grid_csv(path, grid, values, column, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header} grid={grid.kind} m={grid.m}\n")
        fh.write(f"cell_id,center_theta,center_phi,{column}\n")
        for i in range(grid.n):
            fh.write(f"{i},{grid.center_theta[i]:.12e},{grid.center_phi[i]:.12e},{values[i]:.12e}\n")


def read_table(path):
    """Numeric body of a CSV with an optional '#' header and one column row."""
    with open(path) as fh:
        body = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    return np.loadtxt(body[1:], delimiter=",", ndmin=2)


def read_grid_csv(path):
    """Returns (grid, values, header dict)."""
    from .quadrature import SphereGrid
    header = {}
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("#"):
        for tok in first[1:].split():
            if "=" in tok:
                key, val = tok.split("=", 1)
                header[key] = val
    rows = read_table(path)
    kind = header.get("grid", "equal_area")
    m = int(header["m"]) if "m" in header else int(round(np.sqrt(rows.shape[0] / 2)))
    grid = SphereGrid(m, kind)
    if grid.n != rows.shape[0]:
        raise GridMismatch(f"{path}: {rows.shape[0]} rows do not form a {kind} grid with m={m}")
    if not np.allclose(rows[:, 1], grid.center_theta, atol=1e-9) or \
            not np.allclose(rows[:, 2], grid.center_phi, atol=1e-9):
        raise GridMismatch(f"{path}: cell centres do not match the {kind} grid")
    return grid, rows[:, 3], header


# ---------------------------------------------------------------- commands

def cmd_sample(cfg, outdir):
    from .sampler import estimate_canonical_current, estimate_one_point_density, run_chains
    from .oracle import mu0_masses
    model = cfg.to_model()
    scfg = cfg.sampler_config()
    header = _header(cfg)
    try:
        ss = run_chains(model, scfg)
    except NonFiniteDensityEverywhere as exc:
        _write_json(os.path.join(outdir, "instability.json"),
                    {"status": "unstable", "reason": str(exc), "beta": model.beta, "k": model.k}, cfg)
        return EXIT_UNSTABLE
    if "csv" in cfg.output.formats:
        ss.to_csv(os.path.join(outdir, "samples.csv"), header)
    if "npz" in cfg.output.formats:
        ss.save_npz(os.path.join(outdir, "samples.npz"))
    dens = estimate_one_point_density(ss, cfg.sampler.grid_m)
    dens.to_csv(os.path.join(outdir, "density.csv"), header + f" grid=equal_area m={dens.grid.m}")
    diag = dict(ss.diagnostics)
    diag["beta_k_times_k"] = model.beta * model.k
    try:
        beta_c = model.beta if model.beta != 0 else 1.0
        V = model.basis.degree / model.k
        cur = estimate_canonical_current(dens, beta=beta_c, V=V, bandwidth=cfg.sampler.bandwidth,
                                         m0=mu0_masses(dens.grid, model.mu0))
        write_grid_csv(os.path.join(outdir, "current.csv"), dens.grid, cur, "curvature", header)
    except P1GibbsError as exc:
        diag["current_error"] = str(exc)
    guard = diag.get("guard_rate", 0.0)
    unstable = model.beta < 0 and guard > cfg.sampler.guard_threshold
    diag["status"] = "unstable" if unstable else "ok"
    _write_json(os.path.join(outdir, "diagnostics.json"), diag, cfg)
    if unstable:
        _write_json(os.path.join(outdir, "instability.json"),
                    {"status": "unstable", "guard_rate": guard,
                     "threshold": cfg.sampler.guard_threshold}, cfg)
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_oracle(cfg, outdir):
    from .oracle import functional_F, ma_masses_on, psh_projection, solve_ma
    from .quadrature import SphereGrid
    header = _header(cfg)
    o = cfg.oracle
    grid = SphereGrid(o.m)
    w, mu0, k = cfg.weight(), cfg.mu0(), cfg.process.k
    beta = cfg.process.effective_beta()
    if mu0.kind == "poincare" or w.singular is not None:
        # log-log pathway: projection of the singular weight and its energy
        V = w.degree / k
        psi = w.extra(grid.centers) / k
        pf = psh_projection(psi, grid, V)
        write_grid_csv(os.path.join(outdir, "potential.csv"), grid, pf.values, "u", header)
        _write_json(os.path.join(outdir, "residual.json"),
                    {"pathway": "loglog", "F": functional_F(psi, grid, V), "psh_defect": pf.psh_defect()}, cfg)
        return EXIT_OK
    try:
        pf = solve_ma(beta, mu0, w, k, grid, tol=o.tol, max_iter=o.max_iter)
    except NoConvergence as exc:
        _write_json(os.path.join(outdir, "residual.json"),
                    {"status": "no-convergence", "message": str(exc), "trace": exc.trace}, cfg)
        print(f"no convergence: {exc}", file=sys.stderr)
        for row in exc.trace:
            print(f"  {row}", file=sys.stderr)
        return EXIT_NOCONV
    write_grid_csv(os.path.join(outdir, "potential.csv"), grid, pf.values, "u", header)
    write_grid_csv(os.path.join(outdir, "ma_latlon.csv"), grid, pf.ma_masses() / pf.ma_masses().sum(),
                   "mass", header)
    eq = SphereGrid(cfg.sampler.grid_m, "equal_area")
    write_grid_csv(os.path.join(outdir, "density.csv"), eq, ma_masses_on(pf, mu0, eq), "mass", header)
    _write_json(os.path.join(outdir, "residual.json"),
                {"status": "converged", "residual": pf.residual, "history": pf.history,
                 "sup_u": float(np.abs(pf.values).max()), "psh_defect": pf.psh_defect()}, cfg)
    return EXIT_OK


def cmd_compare(cfg, outdir, path_a, path_b):
    from .sampler import total_variation
    ga, a, ha = read_grid_csv(path_a)
    gb, b, hb = read_grid_csv(path_b)
    if ga != gb:
        raise GridMismatch(f"grids differ: {ga!r} vs {gb!r}")
    gh_a, gh_b = ha.get("geometry_hash"), hb.get("geometry_hash")
    if gh_a and gh_b and gh_a != gh_b and not cfg.compare.force:
        raise GridMismatch(f"geometry hashes differ ({gh_a} vs {gh_b}); set compare.force to override")
    a = a / a.sum()
    b = b / b.sum()
    tv = total_variation(a, b)
    passed = tv < cfg.compare.tolerance
    with open(os.path.join(outdir, "residual.csv"), "w") as fh:
        fh.write(f"# {_header(cfg)}\n")
        fh.write("cell_id,mass_a,mass_b,difference\n")
        for i in range(ga.n):
            fh.write(f"{i},{a[i]:.12e},{b[i]:.12e},{a[i] - b[i]:.12e}\n")
    _write_json(os.path.join(outdir, "compare.json"),
                {"tv": tv, "tolerance": cfg.compare.tolerance, "passed": passed,
                 "inputs": [os.path.basename(path_a), os.path.basename(path_b)]}, cfg)
    print(f"TV = {tv:.6f} ({'pass' if passed else 'fail'} at tolerance {cfg.compare.tolerance})")
    return EXIT_OK


def cmd_partition(cfg, outdir):
    from .partition import z_exact, z_mc
    p = cfg.partition
    basis, w, mu0 = cfg.basis(), cfg.weight(), cfg.mu0()
    k, beta = cfg.process.k, cfg.process.effective_beta()
    if p.method == "exact":
        res = z_exact(basis.N, k, beta, basis, w, mu0, mc_samples=p.samples, seed=p.seed)
    else:
        res = z_mc(basis.N, k, beta, basis, w, mu0, p.samples, p.seed)
    with open(os.path.join(outdir, "partition.json"), "w") as fh:
        fh.write(res.to_json(cfg.config_hash()) + "\n")
    res.trace_csv(os.path.join(outdir, "trace.csv"), _header(cfg))
    return EXIT_UNSTABLE if res.divergent else EXIT_OK


def cmd_stability(cfg, outdir):
    from .partition import FanoGeometry, gibbs_stability_scan, strong_gibbs_check
    from .geometry import Divisor
    s = cfg.stability
    D = cfg.divisor()
    if D is not None and any(c >= 1 for c in D.coeffs):
        raise ConfigError("stability scans need a klt divisor", "geometry.divisor")
    geo = FanoGeometry(D, "P1" if D is None else "log-Fano")
    if s.mode == "scan":
        rep = gibbs_stability_scan(geo, s.k_max, s.mc_samples)
        with open(os.path.join(outdir, "stability.json"), "w") as fh:
            fh.write(rep.to_json(cfg.config_hash()) + "\n")
        return EXIT_UNSTABLE if rep.any_unstable else EXIT_OK
    rep = strong_gibbs_check(geo, tuple(s.b_grid), tuple(s.k_range), s.mc_samples)
    _write_json(os.path.join(outdir, "stability.json"), rep, cfg)
    return EXIT_UNSTABLE if any(r["verdict"] == "unbounded" for r in rep["rows"]) else EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="p1gibbs", description="Determinantal Gibbs measures on P^1")
    ap.add_argument("command", choices=["sample", "oracle", "compare", "partition", "stability"])
    ap.add_argument("inputs", nargs="*", help="density CSV files (compare only)")
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out", default=None, help="output directory (overrides output.directory)")
    ap.add_argument("--seed", type=int, default=None, help="seed override for sampler and partition")
    return ap


def main(argv=None):
    from .config import load_config
    args = build_parser().parse_intermixed_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides = {"sampler.seed": args.seed, "partition.seed": args.seed}
        cfg = load_config(args.config, overrides)
        if cfg.command is not None and cfg.command != args.command:
            raise ConfigError(f"config is for '{cfg.command}', not '{args.command}'", "command")
        if args.command == "compare" and len(args.inputs) != 2:
            raise ConfigError("compare needs exactly two density files")
        outdir = args.out or cfg.output.directory
        os.makedirs(outdir, exist_ok=True)
        if args.command == "sample":
            code = cmd_sample(cfg, outdir)
        elif args.command == "oracle":
            code = cmd_oracle(cfg, outdir)
        elif args.command == "compare":
            code = cmd_compare(cfg, outdir, *args.inputs)
        elif args.command == "partition":
            code = cmd_partition(cfg, outdir)
        else:
            code = cmd_stability(cfg, outdir)
        _write_metadata(outdir, cfg, args.command)
        return code
    except (ConfigError, GridMismatch, EmptySpace, NotKlt, DivergentIntegral, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergence as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
