"""Command line entry point: ``irgnm {solve,sweep,diagnose-tc,theory}``.

Every flag may also be given in a flat ``key=value`` file passed with
``--config``; keys are the flag names without leading dashes.  Flags given
on the command line win over the file.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import theory
from .dwr import Budget
from .fem import build_mesh, l1_norm, l2_norm, write_field_csv
from .harness import (
    TABLE_NOISE_LEVELS,
    ExperimentConfig,
    exact_source,
    fit_log_slope,
    run_experiment,
    run_single,
    synthesize_exact_data,
    write_table_csv,
    ErrorReport,
)
from .pde import PdeProblem
from .solver import IrgnmConfig, estimate_tangential_cone, theoretical_stop_bound, write_trace_csv

DEFAULTS = {
    "variant": "ivanov",
    "N": 32,
    "kappa": 1.0,
    "delta": 0.01,
    "rho": 10.0,
    "alpha0": 1.0,
    "theta": 0.5,
    "tau": 1.1,
    "seed": 0,
    "out": None,
    "runs": 5,
    "noise_levels": ",".join(str(d) for d in TABLE_NOISE_LEVELS),
    "noise_model": "gaussian",
    "workers": 1,
    "max_outer": 50,
    "p": 2.0,
    "c_tc": 0.1,
    "gamma": 0.5,
    "c_eta": 0.1,
    "tau_bar": 0.1,
    "tau_hat": 0.5,
    "zeta_bar": 1.0,
    "estimate": False,
    "radius": 1e-3,
    "samples": 10,
    "d0": None,
    "R_dagger": None,
}

TYPES = {
    "N": int, "seed": int, "runs": int, "workers": int, "max_outer": int, "samples": int,
    "variant": str, "out": str, "noise_levels": str, "noise_model": str,
    "estimate": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
}


def _convert(key, value):
    if value is None:
        return None
    return TYPES.get(key, float)(value)


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in DEFAULTS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with default settings")
    p.add_argument("--variant", choices=("ivanov", "tikhonov"))
    p.add_argument("--N", type=int, help="cells per side of the reconstruction mesh")
    p.add_argument("--kappa", type=float)
    p.add_argument("--delta", type=float, help="noise level")
    p.add_argument("--rho", type=float, help="box radius (Ivanov)")
    p.add_argument("--alpha0", type=float, help="initial regularization parameter (Tikhonov)")
    p.add_argument("--theta", type=float, help="decay factor of alpha_k (Tikhonov)")
    p.add_argument("--tau", type=float, help="discrepancy factor")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--noise-model", dest="noise_model", choices=("gaussian", "uniform"))
    p.add_argument("--p", type=float, help="misfit power used by the theory constants")
    p.add_argument("--c-tc", dest="c_tc", type=float, help="assumed tangential cone constant")
    p.add_argument("--gamma", type=float)
    p.add_argument("--estimate", action="store_const", const=True, default=None,
                   help="compute error estimators for every step")
    p.add_argument("--c-eta", dest="c_eta", type=float)
    p.add_argument("--tau-bar", dest="tau_bar", type=float)
    p.add_argument("--tau-hat", dest="tau_hat", type=float)
    p.add_argument("--zeta-bar", dest="zeta_bar", type=float)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irgnm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="single reconstruction from synthetic data")
    _add_common(p)

    p = sub.add_parser("sweep", help="error table over several noise levels")
    _add_common(p)
    p.add_argument("--runs", type=int, help="noise realizations per level")
    p.add_argument("--noise-levels", dest="noise_levels", help="comma separated list")
    p.add_argument("--workers", type=int, help="parallel processes")

    p = sub.add_parser("diagnose-tc", help="empirical tangential cone constant around the exact source")
    _add_common(p)
    p.add_argument("--radius", type=float)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("theory", help="print the constants and the stopping index bound")
    _add_common(p)
    p.add_argument("--d0", type=float, help="initial value d_0 (default: from the zero start)")
    p.add_argument("--R-dagger", dest="R_dagger", type=float, help="R of the exact solution")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config_file(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return settings


def irgnm_config(s: dict) -> IrgnmConfig:
    return IrgnmConfig(
        variant=s["variant"], p=s["p"], alpha0=s["alpha0"], theta=s["theta"], rho=s["rho"],
        tau=s["tau"], delta=s["delta"], max_outer=s["max_outer"], c_tc=s["c_tc"], gamma=s["gamma"],
        budget=Budget(s["c_eta"], s["tau_bar"], s["tau_hat"], s["zeta_bar"]),
        estimate=bool(s["estimate"]),
    )


def experiment_config(s: dict, noise_levels=None, runs=None) -> ExperimentConfig:
    levels = noise_levels
    if levels is None:
        levels = tuple(float(t) for t in str(s["noise_levels"]).split(",") if t.strip())
    return ExperimentConfig(
        N=s["N"], kappa=s["kappa"], noise_levels=levels,
        runs_per_level=s["runs"] if runs is None else runs, seed=s["seed"],
        irgnm=irgnm_config(s), output_dir=Path(s["out"]) if s["out"] else None,
        noise_model=s["noise_model"], workers=s["workers"],
    )


def _fmt_row(r: ErrorReport) -> str:
    return (f"{r.delta:8.4f} {r.err_spot1:10.4f} {r.err_spot2:10.4f} {r.err_spot3:10.4f} "
            f"{r.err_l1:10.4f} {r.k_star_mean:8.2f}")


def cmd_solve(s: dict) -> int:
    cfg = experiment_config(s, noise_levels=(s["delta"],), runs=1)
    y = synthesize_exact_data(cfg.N, cfg.kappa, cfg.data_levels_above)
    o = run_single(cfg, 0, 0, y)
    print(f"status={o.status} k_star={o.k_star} residual={o.residual:.6g} tau*delta={cfg.irgnm.tau * o.delta:.6g}")
    if o.ok:
        for i, e in enumerate(o.err_spots, 1):
            print(f"err_spot{i}={e:.6g}")
        print(f"err_L1={o.err_l1:.6g} (absolute {o.err_l1_abs:.6g})")
    else:
        print(o.message or "no convergence", file=sys.stderr)
    if cfg.output_dir is not None:
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        write_table_csv(out / "table.csv", [ErrorReport(o.delta, *o.err_spots, o.err_l1,
                                                        math.nan if o.k_star is None else o.k_star, [o])])
        write_field_csv(out / "y_exact.csv", y)
        write_field_csv(out / "y_delta.csv", o.y_delta)
        if o.result is not None:
            write_field_csv(out / "s_rec.csv", o.result.s)
            write_trace_csv(out / "run_0.csv", o.result.records)
    return 0 if o.ok else 1


def cmd_sweep(s: dict) -> int:
    cfg = experiment_config(s)
    reports = run_experiment(cfg)
    print(f"{'delta':>8} {'spot1':>10} {'spot2':>10} {'spot3':>10} {'L1':>10} {'k*':>8}")
    for r in reports:
        print(_fmt_row(r))
    ks = [(o.delta, o.k_star) for r in reports for o in r.runs if o.ok]
    if len({d for d, _ in ks}) >= 2:
        a, b, r2 = fit_log_slope(*zip(*ks))
        print(f"k* ~ {a:.3f} + {b:.3f} log(1/delta), R^2 = {r2:.3f}")
    fails = sum(r.failures for r in reports)
    if fails:
        print(f"{fails} run(s) did not converge", file=sys.stderr)
    return 0 if fails == 0 else 1


def cmd_diagnose(s: dict) -> int:
    mesh = build_mesh(s["N"])
    problem = PdeProblem(s["kappa"], mesh)
    est = estimate_tangential_cone(problem, exact_source(mesh), s["radius"], s["samples"], s["seed"])
    print(f"radius={s['radius']:g} samples={s['samples']} skipped={est.skipped}")
    print(f"max ratio={est.max_ratio:.6g} mean ratio={est.ratios.mean() if est.ratios.size else math.nan:.6g}")
    return 0


def cmd_theory(s: dict) -> int:
    cfg = irgnm_config(s)
    p, g, c = cfg.p, cfg.gamma, cfg.c_tc
    print(f"C_gamma = {theory.power_inequality_constant(p, g):.10g}")
    print(f"q = {theory.contraction_factor(p, g, c):.10g}")
    print(f"schedule admissible = {theory.schedule_admissible(p, g, c, cfg.theta)}")
    d0 = s["d0"]
    if d0 is None:
        # F(0) = 0, so the initial residual is the size of the (noise-free) data
        y = synthesize_exact_data(s["N"], s["kappa"])
        r0 = l2_norm(y.mesh, y)
        d0 = theory.initial_d(r0, p, c, cfg.variant)
    R = s["R_dagger"]
    if R is None:
        mesh = build_mesh(s["N"])
        sx = exact_source(mesh)
        R = l1_norm(mesh, sx) if cfg.variant == "tikhonov" else float(abs(sx.values).max())
    bound = theoretical_stop_bound(cfg, d0, R)
    print(f"d0 = {d0:.10g}  R_dagger = {R:.10g}")
    if bound.vacuous:
        print(f"k_bar: vacuous ({bound.reason})")
    else:
        print(f"k_bar(delta={cfg.delta:g}) = {bound.k_bar:.6g}")
    return 0


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "diagnose-tc": cmd_diagnose, "theory": cmd_theory}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        return COMMANDS[args.command](settings)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
