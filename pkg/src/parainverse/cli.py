"""Command-line front end.

``parainverse <command> [--config PATH] [--out DIR] [--seed INT] [--threads INT]``

Commands: ``forward``, ``verify``, ``carleman-scan``, ``reconstruct``,
``kappa`` and ``defaults`` (prints every configuration key with its default).
Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import __version__
from .carleman import WeightOverflow, carleman_sweep, perturbed_sweep, sweep_growth, test_ensemble
from .config import (
    ConfigError,
    RunConfig,
    build_carleman,
    build_grid,
    build_problem,
    build_reconstruction,
    load_config,
    reference,
)
from .dyadic import DyadicPartition, bernstein_check, besov_norm, decompose
from .estimates import closed_bound_check, energy_report
from .export import write_csv, write_json
from .forward import SolverBlowUp, observe, solve
from .grid import Grid, boundary_trace, parse_face, restrict
from .inverse import DegenerateRegression, kappa_fit, reconstruct
from .paraproduct import band_limited_fields, bony_split, measure_constants, paralinearize, product

logger = logging.getLogger("parainverse")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _header(cfg: RunConfig, command: str, seed: int) -> dict:
    return {"command": command, "seed": seed, "version": __version__, "config": cfg.model_dump()}


def _coord_columns(grid: Grid) -> list:
    return [f"x{i + 1}" for i in range(grid.dim)]


def _node_table(grid: Grid) -> np.ndarray:
    return np.stack([x.ravel() for x in grid.mesh()], axis=1)


# ---------------------------------------------------------------------------
# forward


def cmd_forward(cfg: RunConfig, out: Path, seed: int) -> int:
    spec = build_problem(cfg)
    grid = spec.grid
    u = solve(spec, dt=cfg.solver.dt)
    data = observe(u, spec, cfg.experiment.noise_level, seed)
    head = _header(cfg, "forward", seed)
    nodes = _node_table(grid)
    cols = _coord_columns(grid)

    keep = np.arange(0, u.times.size, cfg.solver.frame_stride)
    sol_rows = ([t, *xy, v] for n in keep for t in (u.times[n],)
                for xy, v in zip(nodes, u.frames[n].ravel()))
    files = {}
    files["solution.csv"] = {
        "rows": int(keep.size * nodes.shape[0]),
        "sha256": write_csv(out / "solution.csv", ["t", *cols, "u"], sol_rows, "solution", head),
    }

    obs_rows = []
    for k, face in enumerate(data.faces):
        z, dz = data.z_trace[k], data.dz_trace[k]
        if grid.dim == 1:
            obs_rows += [[face, t, "", zz, dd] for t, zz, dd in zip(data.times, z, dz)]
        else:
            axis, _ = parse_face(grid, face)
            along = grid.coords()[1 - axis]
            obs_rows += [[face, t, s, zz, dd] for n, t in enumerate(data.times)
                         for s, zz, dd in zip(along, z[n], dz[n])]
    files["observation.csv"] = {
        "rows": len(obs_rows),
        "sha256": write_csv(out / "observation.csv", ["face", "t", "s", "z", "dnu_z"], obs_rows, "observation", head),
    }
    snap_rows = ([*xy, v] for xy, v in zip(nodes, data.snapshot.ravel()))
    files["snapshot.csv"] = {
        "rows": int(nodes.shape[0]),
        "sha256": write_csv(out / "snapshot.csv", [*cols, "u_t0"], snap_rows, "snapshot", head),
    }
    write_json(out / "forward.json", {
        **head, "grid": grid.describe(), "problem": spec.describe(), "frames": int(keep.size),
        "nodes": int(nodes.shape[0]), "noise_level": data.noise_level, "clean_rms": data.clean_rms,
        "files": files,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def _check(name: str, passed: bool, measured, threshold, note: str = "") -> dict:
    return {"check": name, "passed": bool(passed), "measured": measured, "threshold": threshold, "note": note}


def _rel(a: np.ndarray, b: np.ndarray, axes) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=axes)) / np.sqrt(np.sum(b ** 2, axis=axes))


def run_checks(cfg: RunConfig, seed: int) -> tuple:
    """The invariant suite used by ``verify``: ``(checks, constants)``."""
    grid = build_grid(cfg)
    part = DyadicPartition(grid, cfg.experiment.partition_profile)
    trials = cfg.experiment.verify_trials
    rng = np.random.default_rng(seed)
    s = cfg.s_besov
    checks = []

    u = rng.standard_normal((trials,) + grid.shape)
    bs = decompose(u, part)
    err = float(np.max(_rel(restrict(grid, bs.reconstruct()), u, grid.axes)))
    checks.append(_check("partition_of_unity", err <= 1e-10, err, 1e-10))
    m = part.multipliers
    worst = 0.0
    for i in range(part.nblocks):
        for j in range(i + 3, part.nblocks):
            worst = max(worst, float(np.max(np.abs(m[i] * m[j]))))
    checks.append(_check("almost_orthogonality", worst == 0.0, worst, 0.0))

    a = band_limited_fields(grid, rng, trials)
    b = band_limited_fields(grid, rng, trials)
    split = bony_split(grid, a, b, part)
    ref = product(grid, a, b)
    bony = float(np.max(_rel(split.total(), ref, grid.axes)))
    checks.append(_check("bony_identity", bony <= 1e-10, bony, 1e-10))

    lo, hi = np.inf, -np.inf
    for q in range(2, part.q_max):
        st = bernstein_check(q, trials, part, seed=seed + q)
        lo, hi = min(lo, st.gradient_range[0]), max(hi, st.gradient_range[1])
    checks.append(_check("bernstein_gradient", lo >= 0.8 and hi <= 4.5, [lo, hi], [0.8, 4.5]))

    fine = measure_constants(grid, trials, s, seed, partition=part)
    coarse_cells = grid.cells[0] // 2
    constants = {"fine": fine.as_dict(), "coarse": None, "drift": None}
    if coarse_cells - 1 >= 31:
        coarse_grid = Grid.uniform(coarse_cells, grid.lengths[0], grid.dim)
        coarse = measure_constants(coarse_grid, trials, s, seed,
                                   partition=DyadicPartition(coarse_grid, part.profile))
        drift = {k: abs(getattr(fine, k) / getattr(coarse, k) - 1.0)
                 for k in ("algebra", "paraproduct", "remainder", "commutator")}
        constants.update(coarse=coarse.as_dict(), drift=drift)
        checks.append(_check("constant_drift", max(drift.values()) < 0.2, drift, 0.2))

    spec = build_problem(cfg)
    sol = solve(spec, dt=cfg.solver.dt)
    frames = sol.frames[:: max(1, sol.times.size // 20)]
    rem = paralinearize(grid, frames, spec.lam, spec.alpha, part).remainder_N
    rem_scaled = paralinearize(grid, 0.5 * frames, spec.lam, spec.alpha, part).remainder_N
    size = float(np.max(np.abs(rem)))
    if size == 0.0:
        checks.append(_check("remainder_zero", bool(np.all(rem_scaled == 0.0)), 0.0, 0.0,
                             "linear configuration: remainder identically zero"))
    else:
        exact = float(np.max(np.abs(rem_scaled - 0.25 * rem)) / size)
        checks.append(_check("remainder_quadratic", exact <= 1e-12, exact, 1e-12))
        ratio = besov_norm(rem, s, part) / np.maximum(besov_norm(rem_scaled, s, part), 1e-300)
        worst_r = float(np.max(np.abs(ratio[besov_norm(rem, s, part) > 0] / 4.0 - 1.0)))
        checks.append(_check("remainder_halving", worst_r <= 0.1, worst_r, 0.1))

    trace = max(float(np.max(np.abs(boundary_trace(grid, sol.frames, f)))) for f in spec.faces)
    checks.append(_check("dirichlet_trace", trace == 0.0, trace, 0.0))
    rep = energy_report(sol, spec, s)
    hk_ok = all(v["ok"] for v in rep.heat_kernel.values())
    checks.append(_check("heat_kernel_bound", hk_ok, {str(k): v["value"] for k, v in rep.heat_kernel.items()},
                         {str(k): v["bound"] for k, v in rep.heat_kernel.items()}))
    finite = rep.ratio is None or bool(np.isfinite(rep.ratio))
    closed = closed_bound_check(sol, spec, s)
    checks.append(_check("energy_ratio_finite", finite, rep.ratio, None,
                         f"closed bound {closed.ratio} ({closed.status})"))
    constants["energy"] = {"ratio": rep.ratio, "eps_measured": rep.eps_measured,
                           "remainder": rep.remainder, "closed_ratio": closed.ratio, "closed_status": closed.status}
    return checks, constants


def cmd_verify(cfg: RunConfig, out: Path, seed: int) -> int:
    checks, constants = run_checks(cfg, seed)
    failed = [c["check"] for c in checks if not c["passed"]]
    head = _header(cfg, "verify", seed)
    rows = [[c["check"], c["passed"], str(c["measured"]).replace(",", ";"),
             str(c["threshold"]).replace(",", ";")] for c in checks]
    write_csv(out / "verify.csv", ["check", "passed", "measured", "threshold"], rows, "verify", head)
    write_json(out / "verify.json", {**head, "passed": not failed, "failed": failed,
                                     "checks": checks, "constants": constants})
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['check']}: {c['measured']}")
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# carleman-scan


def cmd_carleman_scan(cfg: RunConfig, out: Path, seed: int) -> int:
    spec = build_problem(cfg)
    grid = spec.grid
    c = cfg.carleman
    times = spec.times(cfg.solver.dt)
    params = build_carleman(cfg)
    ensemble = test_ensemble(grid, times, c.ensemble_size)
    rows = carleman_sweep(params, ensemble, c.s_values, spec.faces)
    head = _header(cfg, "carleman-scan", seed)
    cols = ["s_C", "lam_C", "beta", "ensemble_id", "lhs", "rhs", "ratio"]
    write_csv(out / "carleman_sweep.csv", cols, rows, "carleman_sweep", head)

    p = cfg.problem
    problem_kw = dict(lam=p.lam, alpha=None if p.alpha is None else tuple(p.alpha), b=p.b, c=p.c, t0=p.t0,
                      delta=p.delta, s=cfg.s_besov, faces=tuple(p.faces), warm_start=p.warm_start)
    prow = perturbed_sweep(grid, c.eps_values, c.s_c, cfg.solver.dt, c.lam_c, c.beta, problem_kw)
    pcols = ["eps", "s_C", "ratio", "linear_ratio", "departure", "lhs", "rhs", "absorb_drift", "absorb_potential"]
    write_csv(out / "carleman_perturbed.csv", pcols, prow, "carleman_perturbed", head)

    max_ratio = {str(s): max(r["ratio"] for r in rows if r["s_C"] == s) for s in map(float, c.s_values)}
    write_json(out / "carleman.json", {
        **head, "max_ratio": max_ratio, "growth": sweep_growth(rows),
        "departure": [r["departure"] for r in prow],
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct and kappa


def cmd_reconstruct(cfg: RunConfig, out: Path, seed: int) -> int:
    spec = build_problem(cfg)
    rc = build_reconstruction(cfg)
    e = cfg.experiment
    if e.gamma_rule == "proportional" and e.noise_level > 0:
        rc = replace(rc, gamma=e.gamma_scale * e.noise_level)
    u = solve(spec, dt=rc.dt)
    data = observe(u, spec, e.noise_level, seed)
    res = reconstruct(spec, data, rc, u=u)
    head = _header(cfg, "reconstruct", seed)
    grid = spec.grid
    rows = ([*xy, fr, ft] for xy, fr, ft in zip(_node_table(grid), res.f_rec.ravel(), spec.f_true.ravel()))
    digest = write_csv(out / "f_rec.csv", [*_coord_columns(grid), "f_rec", "f_true"], rows, "reconstruction", head)
    hist = ([i, j] for i, j in enumerate(res.misfit_history))
    write_csv(out / "misfit.csv", ["iteration", "J"], hist, "misfit_history", head)
    write_csv(out / "reconstruction_summary.csv", ["method", "noise", "error_L2_omega0", "error_L2_omega",
                                                   "iterations", "converged"],
              [[rc.method, data.noise_level, res.error_L2_omega0, res.error_L2_omega, res.iterations,
                res.converged]], "reconstruction_summary", head)
    write_json(out / "reconstruct.json", {
        **head, "method": rc.method, "gamma": rc.gamma, "error_L2_omega0": res.error_L2_omega0, "error_L2_omega": res.error_L2_omega,
        "iterations": res.iterations, "converged": res.converged, "data_norm": res.data_norm,
        "grad_norm": res.grad_norm, "f_rec": "f_rec.csv", "f_rec_sha256": digest,
    })
    print(f"{rc.method}: relative error on Omega_0 = {res.error_L2_omega0:.4g}")
    return EXIT_OK


def cmd_kappa(cfg: RunConfig, out: Path, seed: int) -> int:
    spec = build_problem(cfg)
    rc = build_reconstruction(cfg)
    e = cfg.experiment
    seeds = [seed + s for s in e.seeds]
    fit = kappa_fit(spec, rc, e.noise_levels, seeds, e.gamma_rule, e.gamma_scale)
    head = _header(cfg, "kappa", seed)
    cols = ["noise", "gamma", "data_norm", "median_error", "q1_error", "q3_error", "median_error_vs_truth"]
    rows = [dict(r, residual=res) for r, res in zip(fit.rows, fit.residuals)]
    write_csv(out / "kappa.csv", cols + ["residual"], rows, "kappa_fit", head)
    write_json(out / "kappa.json", {**head, "kappa": fit.kappa, "intercept": fit.intercept, "r2": fit.r2,
                                    "ci95": list(fit.ci), "rows": len(fit.rows)})
    print(f"kappa_hat = {fit.kappa:.4f} (R^2 = {fit.r2:.4f}, 95% CI [{fit.ci[0]:.3f}, {fit.ci[1]:.3f}])")
    return EXIT_OK


COMMANDS = {
    "forward": cmd_forward,
    "verify": cmd_verify,
    "carleman-scan": cmd_carleman_scan,
    "reconstruct": cmd_reconstruct,
    "kappa": cmd_kappa,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parainverse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "defaults"):
        p = sub.add_parser(name)
        if name == "defaults":
            continue
        p.add_argument("--config", type=Path, default=None, help="YAML configuration file")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, default=None, help="overrides experiment.seed")
        p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        print(reference(), end="")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.experiment.seed if args.seed is None else args.seed
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with sfft.set_workers(args.threads):
            return COMMANDS[args.command](cfg, out, seed)
    except (SolverBlowUp, WeightOverflow, DegenerateRegression, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
