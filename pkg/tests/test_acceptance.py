"""One test per acceptance criterion; a pass/fail line for each is printed
in the terminal summary.  The full N=32 sweep is run once per session."""

import math
import subprocess
import sys

import numpy as np
import pytest

from irgnm.dwr import Budget, compute_estimators, estimate_error, refinement_controller, solve_dual_weights, stationarity_residuals
from irgnm.fem import Field, build_mesh, l2_inner
from irgnm.harness import ExperimentConfig, run_experiment, fit_log_slope, synthesize_exact_data
from irgnm.pde import PdeProblem, solve_linearized
from irgnm.solver import IrgnmConfig, run_irgnm

from test_dwr import make_point, two_level_instance
from test_fem import poisson_errors
from test_pde import derivative_errors, random_interior
from test_subproblem import ivanov_oracle_independent, tikhonov_oracle_comparison
from test_theory import contraction_mismatch, power_inequality_violations

TAU, RHO = 1.1, 10.0
ROUNDOFF = 1e-10


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    cfg = ExperimentConfig(N=32, kappa=1.0, runs_per_level=5, seed=0,
                           irgnm=IrgnmConfig(variant="ivanov", rho=RHO, tau=TAU),
                           output_dir=tmp_path_factory.mktemp("sweep"))
    return run_experiment(cfg)


def test_criterion_01_table_trend(sweep, criterion_detail):
    l1 = [r.err_l1 for r in sweep]
    spot2 = {r.delta: r.err_spot2 for r in sweep}
    checks = {
        "L1 decreasing": all(a > b for a, b in zip(l1, l1[1:])),
        "L1(0.01) in [0.009, 0.038]": 0.009 <= l1[-1] <= 0.038,
        "spot2(0.01) < 0.5": spot2[0.01] < 0.5,
        "spot2(0.1) > 2": spot2[0.1] > 2,
    }
    failed = [k for k, ok in checks.items() if not ok]
    criterion_detail(
        "mean L1 = " + ", ".join(f"{v:.4f}" for v in l1)
        + f"; spot2(0.1) = {spot2[0.1]:.3f}, spot2(0.01) = {spot2[0.01]:.3f}"
        + (f"; failed: {', '.join(failed)}" if failed else "")
    )
    assert sum(r.failures for r in sweep) == 0
    assert not failed, failed


def test_criterion_02_stopping_index_log_fit(sweep, criterion_detail):
    pairs = [(o.delta, o.k_star) for r in sweep for o in r.runs if o.ok]
    a, b, r2 = fit_log_slope(*zip(*pairs))
    ks = [r.k_star_mean for r in sweep]
    criterion_detail(f"mean k* = {ks}; fit a = {a:.3f}, b = {b:.3f}, R^2 = {r2:.3f}")
    assert b >= 0
    assert r2 >= 0.5


def test_criterion_03_discrepancy_contract(sweep, criterion_detail):
    runs = [o for r in sweep for o in r.runs if o.ok]
    bad = 0
    for o in runs:
        target = TAU * o.delta
        res = [rec.residual for rec in o.result.records]
        bad += res[-1] > target + ROUNDOFF
        if o.k_star > 0:
            bad += res[-2] <= target - ROUNDOFF
        bad += any(v <= target for v in res[:-1])
    criterion_detail(f"{len(runs)} successful runs, {bad} violations")
    assert runs and bad == 0


def test_criterion_04_ivanov_feasibility(sweep, criterion_detail):
    worst = max(np.max(np.abs(s.values)) for r in sweep for o in r.runs for s in o.result.iterates)
    criterion_detail(f"max |s_k| over all iterates = {float(worst)!r}")
    assert worst <= RHO + 1e-12


def test_criterion_05_oracle_equivalence(criterion_detail):
    iv_obj, iv_sol = ivanov_oracle_independent()
    tk_obj, tk_sol, _ = tikhonov_oracle_comparison()
    criterion_detail(f"100+100 instances; ivanov obj {iv_obj:.1e} sol {iv_sol:.1e}; "
                     f"tikhonov obj {tk_obj:.1e} sol {tk_sol:.1e}")
    assert iv_obj <= 1e-8 and iv_sol <= 1e-6
    assert tk_obj <= 1e-8 and tk_sol <= 1e-6


def test_criterion_06_derivative_and_adjoint(criterion_detail):
    ts = 10.0 ** -np.arange(1, 7)
    slope = np.polyfit(np.log(ts), np.log(derivative_errors(ts)), 1)[0]
    m = build_mesh(16)
    p = PdeProblem(1.0, m)
    rng = np.random.default_rng(2)
    ul = random_interior(m, rng)
    worst = 0.0
    for _ in range(20):
        a, b = (Field(m, rng.standard_normal(m.n_nodes)) for _ in range(2))
        lhs = l2_inner(m, solve_linearized(p, ul, a), b)
        rhs = l2_inner(m, a, solve_linearized(p, ul, b))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    criterion_detail(f"FD order {slope:.3f}; adjoint mismatch {worst:.1e}")
    assert slope >= 0.9
    assert worst <= 1e-10


def test_criterion_07_fem_order(criterion_detail):
    e = poisson_errors()
    ratios = [a / b for a, b in zip(e, e[1:])]
    criterion_detail("L2 error ratios " + ", ".join(f"{r:.3f}" for r in ratios))
    assert all(3.4 <= r <= 4.6 for r in ratios)


def test_criterion_08_power_and_contraction_constants(criterion_detail):
    viol = power_inequality_violations(10_000)
    mismatch = contraction_mismatch()
    criterion_detail(f"{viol} violations in 10^4 samples; contraction mismatch {mismatch:.1e}")
    assert viol == 0
    assert mismatch <= 1e-14


def _controller_exact(est, residual, delta):
    """Decisions equal the budget inequalities, including budgets placed at
    or one ulp below the computed values."""
    budgets = [Budget()]
    for scale in (1.0, math.nextafter(1.0, 0.0)):
        budgets.append(Budget(c_eta=0.0, tau_bar=scale * abs(est.eta) / delta,
                              tau_hat=scale * abs(est.xi) / delta, zeta_bar=scale * abs(est.zeta)))
    ok = True
    for b in budgets:
        expect = (abs(est.eta) <= b.c_eta * residual + b.tau_bar * delta
                  and abs(est.xi) <= b.tau_hat * delta and abs(est.zeta) <= b.zeta_bar)
        ok &= refinement_controller(b, est, residual, delta).accept == expect
    return ok


def test_criterion_09_dwr_sanity(criterion_detail):
    # trivial case
    m = build_mesh(8)
    zero = Field(m, np.zeros(m.n_nodes))
    pt0, _ = make_point(PdeProblem(1.0, m), zero, s_k=zero)
    e0 = compute_estimators(pt0)
    trivial = e0.eps1 == 0 and e0.eps3 == 0
    # stationarity plug-back and two-level truth
    inst = two_level_instance()
    pt8, I8 = inst[8]
    pt16, I16 = inst[16]
    stat = max(stationarity_residuals(pt8).values())
    eps = estimate_error(pt8, solve_dual_weights(pt8, "I1"))
    truth = I16 - I8
    ratio = eps / truth
    # controller on estimators computed inside an actual run
    y = synthesize_exact_data(8, 1.0)
    delta = 0.1
    res = run_irgnm(PdeProblem(1.0, y.mesh), IrgnmConfig(variant="tikhonov", delta=delta, estimate=True), y)
    recs = [r for r in res.records if r.estimators is not None]
    ctrl = all(_controller_exact(r.estimators, r.residual, delta) for r in recs) and len(recs) > 0
    criterion_detail(f"trivial {trivial}; stationarity {stat:.1e}; eps1 {eps:.4g} vs truth {truth:.4g} "
                     f"(ratio {ratio:.2f}); controller checked on {len(recs)} steps")
    assert trivial
    assert stat < 1e-9
    assert np.sign(eps) == np.sign(truth) and 0.2 <= ratio <= 5
    assert ctrl


def test_criterion_10_determinism(tmp_path, criterion_detail):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "irgnm", "sweep", "--N", "8", "--runs", "2",
               "--noise-levels", "0.2,0.1", "--seed", "11", "--out", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    criterion_detail(f"{len(same)}/{len(names)} CSV files bit-identical")
    assert names == sorted(p.name for p in outs[1].iterdir())
    assert len(names) > 5 and same == names
