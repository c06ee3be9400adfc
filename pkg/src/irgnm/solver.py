"""Outer Gauss-Newton iteration with discrepancy stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import theory
from .dwr import Budget, Decision, EstimatorSet, build_stationary_point, compute_estimators, refinement_controller
from .fem import Field, l1_norm, prolong
from .pde import PdeProblem, solve_forward, solve_linearized, misfit_norm
from .subproblem import QuadraticStep, StepResult, solve_ivanov_step, solve_tikhonov_step

__all__ = [
    "IrgnmConfig",
    "IterationRecord",
    "IrgnmResult",
    "run_irgnm",
    "regularizer",
    "theoretical_stop_bound",
    "TangentialConeEstimate",
    "estimate_tangential_cone",
    "write_trace_csv",
]

log = logging.getLogger(__name__)

VARIANTS = ("tikhonov", "ivanov")


@dataclass
class IrgnmConfig:
    variant: str = "ivanov"
    p: float = 2.0
    alpha0: float = 1.0
    theta: float = 0.5
    rho: float = 10.0
    tau: float = 1.1
    delta: float = 0.0
    max_outer: int = 50
    c_tc: float = 0.1
    gamma: float = 0.5
    budget: Budget = field(default_factory=Budget)
    inner_tol: float = 1e-8
    inner_max_iter: int = 10_000
    newton_rtol: float = 1e-4
    estimate: bool = False
    adaptive: bool = False
    max_level: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.tau <= 1:
            raise ValueError("tau must exceed 1")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.variant == "tikhonov" and (self.alpha0 <= 0 or not 0 < self.theta < 1):
            raise ValueError("need alpha0 > 0 and 0 < theta < 1")
        if self.variant == "ivanov" and self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.budget.tau_hat >= self.tau:
            raise ValueError("budget tau_hat must be smaller than tau")
        if self.max_outer < 0:
            raise ValueError("max_outer must be nonnegative")

    def alpha(self, k: int) -> float:
        return self.alpha0 * self.theta**k

    def schedule_value(self, k: int) -> float:
        return self.alpha(k) if self.variant == "tikhonov" else self.rho

    def replace(self, **changes) -> "IrgnmConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return IrgnmConfig(**vals)


@dataclass
class IterationRecord:
    """State of iterate ``k`` and the step taken from it (if any)."""

    k: int
    residual: float
    regularizer_value: float
    alpha_or_rho: float
    level: int = 0
    newton_iterations: int = 0
    inner_iters: int | None = None
    kkt_residual: float | None = None
    active_set_size: int | None = None
    objective: float | None = None
    estimators: EstimatorSet | None = None
    decision: Decision | None = None

    @property
    def eta(self):
        return None if self.estimators is None else self.estimators.eta

    @property
    def xi(self):
        return None if self.estimators is None else self.estimators.xi

    @property
    def zeta(self):
        return None if self.estimators is None else self.estimators.zeta


@dataclass
class IrgnmResult:
    s: Field
    records: list[IterationRecord]
    stop_index: int | None
    status: str
    iterates: list[Field] = field(default_factory=list)
    problem: PdeProblem | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def __iter__(self):
        return iter((self.s, self.records, self.stop_index))


def regularizer(problem: PdeProblem, s: Field, variant: str) -> float:
    """``R(s)``: vertex-quadrature L1 norm or max norm over the control nodes."""
    if variant == "tikhonov":
        return l1_norm(problem.mesh, Field(problem.mesh, s.values * problem.control_mask))
    vals = s.values[problem.control_dofs]
    return float(np.max(np.abs(vals), initial=0.0))


def _solve_step(step: QuadraticStep, config: IrgnmConfig, k: int) -> StepResult:
    if config.variant == "ivanov":
        return solve_ivanov_step(step, config.rho, config.inner_tol, config.inner_max_iter)
    return solve_tikhonov_step(step, config.alpha(k), config.inner_tol, config.inner_max_iter)


def _up(f: Field, problem: PdeProblem) -> Field:
    return prolong(f, problem.mesh)


def run_irgnm(
    problem: PdeProblem,
    config: IrgnmConfig,
    y_delta: Field,
    s0: Field | None = None,
) -> IrgnmResult:
    """Run the iteration until ``||F(s_k) - y|| <= tau delta``.

    Returns the final source, one record per visited iterate and the
    stopping index.  Reaching ``max_outer`` (or, in adaptive mode, the
    refinement limit) is reported through ``status`` instead of raising.
    """
    mesh = problem.mesh
    s = Field(mesh, np.zeros(mesh.n_nodes)) if s0 is None else Field(mesh, s0.values.copy())
    if config.variant == "ivanov" and regularizer(problem, s, "ivanov") > config.rho:
        raise ValueError("initial source violates the box constraint")

    # stationarity checks of the estimator need an essentially exact state
    newton_rtol = 1e-12 if config.estimate else config.newton_rtol
    target = config.tau * config.delta
    records: list[IterationRecord] = []
    iterates = [s]
    u = None
    level = 0
    y = y_delta

    k = 0
    while True:
        u, report = solve_forward(problem, s, u, rtol=newton_rtol)
        residual = misfit_norm(problem, u, y)
        rec = IterationRecord(
            k, residual, regularizer(problem, s, config.variant), config.schedule_value(k),
            level=level, newton_iterations=report.iterations,
        )
        records.append(rec)
        log.debug("k=%d residual=%.6g level=%d", k, residual, level)
        if residual <= target:
            return IrgnmResult(s, records, k, "converged", iterates, problem)
        if k >= config.max_outer:
            return IrgnmResult(s, records, None, "max_outer", iterates, problem)

        while True:
            step = QuadraticStep(problem, u, s, y)
            res = _solve_step(step, config, k)
            rec.inner_iters = res.iterations
            rec.kkt_residual = res.kkt_residual
            rec.active_set_size = res.active_set_size
            rec.objective = res.objective
            if not config.estimate:
                break
            point = build_stationary_point(problem, step, res, config.variant, config.schedule_value(k))
            est = compute_estimators(point)
            rec.estimators = est
            rec.decision = refinement_controller(config.budget, est, residual, config.delta)
            if not config.adaptive or rec.decision.accept:
                break
            if level >= config.max_level:
                return IrgnmResult(s, records, None, "level_limit", iterates, problem)
            problem = problem.refined()
            s, y, u = _up(s, problem), _up(y, problem), _up(u, problem)
            u, _ = solve_forward(problem, s, u, rtol=newton_rtol)
            level += 1
            residual = misfit_norm(problem, u, y)
            rec.level = level
            rec.residual = residual
            if residual <= target:
                return IrgnmResult(s, records, k, "converged", iterates, problem)
        s = res.s_next
        iterates.append(s)
        k += 1


def theoretical_stop_bound(config: IrgnmConfig, d0: float, R_dagger: float) -> theory.StopBound:
    """A priori bound ``k_bar(delta)`` for ``config`` (see :mod:`irgnm.theory`)."""
    return theory.stopping_bound(
        p=config.p, theta=config.theta, alpha0=config.alpha0, c_tc=config.c_tc,
        gamma=config.gamma, tau=config.tau, delta=config.delta, d0=d0,
        R_dagger=R_dagger, variant=config.variant,
    )


@dataclass
class TangentialConeEstimate:
    max_ratio: float
    ratios: np.ndarray
    skipped: int


def estimate_tangential_cone(
    problem: PdeProblem,
    center: Field,
    radius: float,
    samples: int,
    seed: int = 0,
) -> TangentialConeEstimate:
    """Empirical constant of the tangential cone inequality around ``center``.

    Pairs ``(center, center + radius * d)`` with ``d`` uniform in the unit
    max-norm ball on the control nodes.  Pairs with ``F(s~) = F(s)`` are
    skipped and counted.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    mesh = problem.mesh
    u, _ = solve_forward(problem, center, rtol=1e-12)
    ratios, skipped = [], 0
    for _ in range(samples):
        d = rng.uniform(-1.0, 1.0, mesh.n_nodes) * problem.control_mask
        ds = Field(mesh, radius * d)
        u2, _ = solve_forward(problem, center + ds, u, rtol=1e-12)
        lin = solve_linearized(problem, u, Field(mesh, ds.values * problem.control_mask))
        diff = misfit_norm(problem, u2, u)
        if diff == 0.0:
            skipped += 1
            continue
        rem = misfit_norm(problem, u2 - lin, u)
        ratios.append(rem / diff)
    arr = np.asarray(ratios)
    return TangentialConeEstimate(float(arr.max()) if arr.size else float("nan"), arr, skipped)


TRACE_COLUMNS = ("k", "residual", "regularizer", "alpha_or_rho", "eta", "xi", "zeta", "inner_iters")


def write_trace_csv(path, records: list[IterationRecord]) -> None:
    """One row per iterate; empty cells where a value does not apply."""

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, (int, np.integer)):
            return str(v)
        return repr(float(v))

    lines = [",".join(TRACE_COLUMNS)]
    for r in records:
        row = (r.k, r.residual, r.regularizer_value, r.alpha_or_rho, r.eta, r.xi, r.zeta, r.inner_iters)
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
