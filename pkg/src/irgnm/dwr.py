"""Dual weighted residual estimators for one Gauss-Newton step.

The step is written as a saddle point of the Lagrangian (quantity ``I_2`` and
its state constraint dropped)

    L = J(s, v, u) + <A'_s (s - s_k) + A'_u v, lam> + <A(s_k, u), mu>

with ``A(s, u) = K u + kappa W u^3 - M chi_c s`` and ``J`` the squared
misfit plus ``alpha * ||s||_1`` (Tikhonov) or the box indicator (Ivanov).
Nodal vectors are used throughout; ``v, u, lam, mu`` are interior blocks
padded with boundary zeros, ``s`` lives on the control nodes.

For a quantity of interest ``I`` the dual weights solve
``L''(z)(zbar, .) = -I'(z)`` with the nonsmooth part frozen at the primal
active set, and the error estimate is

    eps = 1/2 [ L'(z)(pi zbar - zbar) + (I'(z) + L''(z)(zbar, .))(pi z - z) ]

evaluated with the forms of the once-refined mesh, ``pi`` being the
patchwise quadratic recovery.  The third-order remainder is neglected, so
the estimates carry no reliability guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .fem import Field, prolong, quadratic_recovery
from .pde import PdeProblem, solve_mu_tilde

__all__ = [
    "StationaryPoint",
    "DualPoint",
    "EstimatorSet",
    "Budget",
    "Decision",
    "DwrError",
    "build_stationary_point",
    "lagrangian_gradient",
    "hessian_apply",
    "quantity_gradient",
    "stationarity_residuals",
    "solve_dual_weights",
    "estimate_error",
    "compute_estimators",
    "refinement_controller",
    "run_refinement",
]

COMPONENTS = ("s", "v", "u", "lam", "mu")


class DwrError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class StationaryPoint:
    """Discrete stationary point ``z = (s, v, u, lam, mu)`` of one step.

    ``u`` is the linearization state ``S(s_k)``; ``param`` is ``alpha_k`` for
    the Tikhonov and ``rho`` for the Ivanov variant.
    """

    problem: PdeProblem
    variant: str
    param: float
    s_k: np.ndarray
    y: np.ndarray
    s: np.ndarray
    v: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    def vars(self) -> dict[str, np.ndarray]:
        return {c: getattr(self, c) for c in COMPONENTS}

    def free_set(self) -> np.ndarray:
        """Control dofs where the nonsmooth term is differentiable."""
        sc = self.s[self.problem.control_dofs]
        if self.variant == "tikhonov":
            return np.flatnonzero(sc != 0.0)
        return np.flatnonzero(np.abs(sc) < self.param)

    def prolonged(self, fine: PdeProblem) -> "StationaryPoint":
        m = self.problem.mesh

        def up(a):
            return prolong(Field(m, a), fine.mesh).values

        return StationaryPoint(
            fine, self.variant, self.param, up(self.s_k), up(self.y),
            up(self.s), up(self.v), up(self.u), up(self.lam), up(self.mu),
        )


@dataclass(frozen=True, eq=False)
class DualPoint:
    which: str
    values: dict[str, np.ndarray]
    free: np.ndarray


@dataclass
class EstimatorSet:
    """Signed estimates and the derived budget quantities.

    ``eta`` is the proxy ``eta_{k-1} ~ xi_k`` available at step ``k``.
    """

    eps1: float
    eps3: float | None = None
    eta: float = field(init=False)
    xi: float = field(init=False)
    zeta: float | None = field(init=False)
    remainder_neglected: bool = True

    def __post_init__(self):
        self.xi = abs(self.eps1)
        self.eta = self.xi
        self.zeta = self.eps3


@dataclass(frozen=True)
class Budget:
    c_eta: float = 0.1
    tau_bar: float = 0.1
    tau_hat: float = 0.5
    zeta_bar: float = 1.0


@dataclass(frozen=True)
class Decision:
    action: str
    violations: tuple[str, ...] = ()

    @property
    def accept(self) -> bool:
        return self.action == "accept"


def build_stationary_point(problem, step, result, variant: str, param: float) -> StationaryPoint:
    """Assemble ``z`` from a solved step (computes ``mu``)."""
    mu = solve_mu_tilde(problem, step.linearization_state, result.v, result.lam, step.data)
    return StationaryPoint(
        problem, variant, float(param),
        step.current_source.values.copy(), step.data.values.copy(),
        result.s_next.values.copy(), result.v.values.copy(),
        step.linearization_state.values.copy(), result.lam.values.copy(), mu.values.copy(),
    )


def _ops(problem: PdeProblem, u: np.ndarray):
    I = problem.mesh.interior
    ctrl = problem.control_dofs
    Kw = problem.linearized_operator(u)
    return I, ctrl, Kw, problem.observed_mass, problem.mass


def lagrangian_gradient(point: StationaryPoint, sign: np.ndarray | None = None):
    """Blocks of ``L'(z)``; the ``s`` block holds the smooth part plus
    ``alpha * w * sign`` when a sign vector is given (Tikhonov)."""
    p = point.problem
    I, ctrl, Kw, Mo, M = _ops(p, point.u)
    kappa, wI = p.kappa, p.w_int
    s, v, u, lam, mu = point.s, point.v, point.u, point.lam, point.mu
    r = Mo @ (u + v - point.y)
    g_s = -(M[ctrl][:, I] @ lam[I])
    if sign is not None and point.variant == "tikhonov":
        g_s = g_s + point.param * p.mesh.weights[ctrl] * sign
    g_v = 2.0 * r[I] + Kw @ lam[I]
    g_u = 2.0 * r[I] + 6.0 * kappa * wI * (u * v * lam)[I] + Kw @ mu[I]
    g_lam = Kw @ v[I] - (M @ (p.control_mask * (s - point.s_k)))[I]
    g_mu = (
        p.K_ii @ u[I] + kappa * wI * u[I] ** 3
        - (M @ (p.control_mask * point.s_k))[I]
    )
    return {"s": g_s, "v": g_v, "u": g_u, "lam": g_lam, "mu": g_mu}


def hessian_apply(point: StationaryPoint, zbar: dict[str, np.ndarray]):
    """Blocks of ``L''(z)(zbar, .)`` for the smooth part of the Lagrangian."""
    p = point.problem
    I, ctrl, Kw, Mo, M = _ops(p, point.u)
    kappa, wI = p.kappa, p.w_int
    v, u, lam, mu = (a[I] for a in (point.v, point.u, point.lam, point.mu))
    sb = zbar["s"]
    vb, ub, lb, mb = (zbar[c][I] for c in ("v", "u", "lam", "mu"))
    Mo_ii = Mo[I][:, I]
    src = np.zeros(p.mesh.n_nodes)
    src[ctrl] = sb
    h_s = -(M[ctrl][:, I] @ lb)
    h_v = 2.0 * Mo_ii @ (ub + vb) + Kw @ lb + 6.0 * kappa * wI * u * lam * ub
    h_u = (
        2.0 * Mo_ii @ (ub + vb)
        + 6.0 * kappa * wI * (ub * v * lam + u * vb * lam + u * v * lb + u * mu * ub)
        + Kw @ mb
    )
    h_lam = Kw @ vb + 6.0 * kappa * wI * u * v * ub - (M @ src)[I]
    h_mu = Kw @ ub
    return {"s": h_s, "v": h_v, "u": h_u, "lam": h_lam, "mu": h_mu}


def quantity_gradient(point: StationaryPoint, which: str, free: np.ndarray | None = None):
    """``I'(z)`` blocks for ``I1 = ||C(u) - y||`` or ``I3 = ||s||_1``."""
    p = point.problem
    I, ctrl = p.mesh.interior, p.control_dofs
    out = {"s": np.zeros(len(ctrl))}
    for c in ("v", "u", "lam", "mu"):
        out[c] = np.zeros(len(I))
    if which == "I1":
        r = p.observed_mass @ (point.u - point.y)
        norm = np.sqrt(max(float((point.u - point.y) @ r), 0.0))
        if norm > 0:
            out["u"] = r[I] / norm
    elif which == "I3":
        sc = point.s[ctrl]
        g = p.mesh.weights[ctrl] * np.sign(sc)
        if free is not None:
            mask = np.zeros(len(ctrl), bool)
            mask[free] = True
            g = np.where(mask, g, 0.0)
        out["s"] = g
    else:
        raise ValueError(f"unknown quantity {which!r}")
    return out


def _rel(res: np.ndarray, *terms: np.ndarray) -> float:
    scale = sum(float(np.max(np.abs(t), initial=0.0)) for t in terms)
    return float(np.max(np.abs(res), initial=0.0)) / max(scale, 1e-300)


def stationarity_residuals(point: StationaryPoint) -> dict[str, float]:
    """Relative residuals of every equation of the discrete optimality system."""
    p = point.problem
    I, ctrl, Kw, Mo, M = _ops(p, point.u)
    g = lagrangian_gradient(point)
    r = Mo @ (point.u + point.v - point.y)
    src = (M @ (p.control_mask * (point.s - point.s_k)))[I]
    out = {
        "v": _rel(g["v"], 2.0 * r[I], Kw @ point.lam[I]),
        "u": _rel(g["u"], 2.0 * r[I], 6.0 * p.kappa * p.w_int * (point.u * point.v * point.lam)[I],
                  Kw @ point.mu[I]),
        "lam": _rel(g["lam"], Kw @ point.v[I], src),
        "mu": _rel(g["mu"], p.K_ii @ point.u[I], p.kappa * p.w_int * point.u[I] ** 3,
                   (M @ (p.control_mask * point.s_k))[I]),
    }
    # s: certificate of the subdifferential inclusion, in units of lam
    w = p.mesh.weights[ctrl]
    m_lam = -g["s"] / w  # = (M lam)_i / w_i
    sc = point.s[ctrl]
    if point.variant == "tikhonov":
        a = point.param
        viol = np.where(sc != 0, m_lam - a * np.sign(sc), np.maximum(np.abs(m_lam) - a, 0.0))
        out["s"] = float(np.max(np.abs(viol), initial=0.0)) / a
    else:
        rho = point.param
        viol = np.where(
            sc >= rho, np.minimum(m_lam, 0.0),
            np.where(sc <= -rho, np.maximum(m_lam, 0.0), m_lam),
        )
        scale = max(float(np.max(np.abs(m_lam), initial=0.0)), 1e-300)
        out["s"] = float(np.max(np.abs(viol), initial=0.0)) / scale
    return out


def solve_dual_weights(point: StationaryPoint, which: str) -> DualPoint:
    """Dual weights ``zbar`` solving ``L''(z)(zbar, .) = -I'(z)``.

    The source component is restricted to the free set of the primal
    solution.  Solved by block elimination: ``ubar`` from the state row,
    ``(sbar, vbar, lambar)`` from the step's optimality system, ``mubar``
    last.
    """
    p = point.problem
    I, ctrl, Kw, Mo, M = _ops(p, point.u)
    kappa, wI = p.kappa, p.w_int
    v, u, lam, mu = (a[I] for a in (point.v, point.u, point.lam, point.mu))
    Mo_ii = Mo[I][:, I]
    free = point.free_set()
    d = quantity_gradient(point, which, free)
    lu = splu(Kw)

    ub = lu.solve(-d["mu"])
    rhs_v = -d["v"] - 2.0 * Mo_ii @ ub - 6.0 * kappa * wI * u * lam * ub
    rhs_l = -d["lam"] - 6.0 * kappa * wI * u * v * ub
    M_IF = M[I][:, ctrl[free]].toarray()
    a = lu.solve(rhs_l)
    rhs_s = M_IF.T @ lu.solve(rhs_v - 2.0 * Mo_ii @ a) - d["s"][free]
    sb_free = np.zeros(len(free))
    if len(free) and np.any(rhs_s != 0.0):
        B = lu.solve(M_IF)
        H = 2.0 * B.T @ (Mo_ii @ B)
        try:
            sb_free = sla.solve(0.5 * (H + H.T), rhs_s, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
            raise DwrError(f"singular dual system on {len(free)} free dofs: {exc}") from exc
        if not np.all(np.isfinite(sb_free)):
            raise DwrError("dual system produced non-finite weights")
    vb = lu.solve(rhs_l + M_IF @ sb_free)
    lb = lu.solve(rhs_v - 2.0 * Mo_ii @ vb)
    rhs_u = -d["u"] - (
        2.0 * Mo_ii @ (ub + vb)
        + 6.0 * kappa * wI * (ub * v * lam + u * vb * lam + u * v * lb + u * mu * ub)
    )
    mb = lu.solve(rhs_u)

    sbar = np.zeros(len(ctrl))
    sbar[free] = sb_free
    vals = {"s": sbar}
    for name, blk in (("v", vb), ("u", ub), ("lam", lb), ("mu", mb)):
        vals[name] = p.embed(blk)
    return DualPoint(which, vals, free)


def _full_s(problem: PdeProblem, sc: np.ndarray) -> np.ndarray:
    out = np.zeros(problem.mesh.n_nodes)
    out[problem.control_dofs] = sc
    return out


def _dot(problem: PdeProblem, blocks: dict, weights: dict[str, np.ndarray]) -> float:
    I, ctrl = problem.mesh.interior, problem.control_dofs
    total = float(blocks["s"] @ weights["s"][ctrl])
    for c in ("v", "u", "lam", "mu"):
        total += float(blocks[c] @ weights[c][I])
    return total


def estimate_error(
    point: StationaryPoint,
    dual: DualPoint,
    *,
    stationarity_tol: float = 1e-9,
    consistency: bool = True,
) -> float:
    """Signed estimate of ``I(z) - I(z_h)`` for ``dual.which``.

    With ``consistency`` the term ``L'_fine(z_h)(zbar_h)`` is added: the
    vertex quadrature of the fine mesh differs from the coarse one, so the
    discrete stationarity does not annihilate the prolonged dual weights.
    """
    res = stationarity_residuals(point)
    worst = max(res.values())
    if worst > stationarity_tol:
        raise DwrError(f"point is not stationary (max residual {worst:.2e}: {res})")

    p = point.problem
    mesh = p.mesh
    if mesh.n_per_side % 2:
        raise DwrError("error estimation needs an even number of cells per side")
    fine = p.refined()
    zf = point.prolonged(fine)

    zbar = dict(dual.values)
    zbar["s"] = _full_s(p, zbar["s"])
    primal = point.vars()

    def split(vals):
        rec = {c: quadratic_recovery(Field(mesh, vals[c])) for c in COMPONENTS}
        return ({c: r.base.values for c, r in rec.items()},
                {c: r.weight.values for c, r in rec.items()})

    zbar_f, zbar_w = split(zbar)
    _, z_w = split(primal)

    sign = None
    if point.variant == "tikhonov":
        sign = np.sign(zf.s[fine.control_dofs])
    grad_f = lagrangian_gradient(zf, sign)
    zbar_blocks = {"s": zbar_f["s"][fine.control_dofs]}
    for c in ("v", "u", "lam", "mu"):
        zbar_blocks[c] = zbar_f[c]
    hess_f = hessian_apply(zf, zbar_blocks)
    dq = quantity_gradient(zf, dual.which)
    dual_res = {c: dq[c] + hess_f[c] for c in COMPONENTS}

    eps = 0.5 * (_dot(fine, grad_f, zbar_w) + _dot(fine, dual_res, z_w))
    if consistency:
        eps += _dot(fine, grad_f, zbar_f)
    return eps


def compute_estimators(point: StationaryPoint, **kw) -> EstimatorSet:
    eps1 = estimate_error(point, solve_dual_weights(point, "I1"), **kw)
    eps3 = None
    if point.variant == "tikhonov":
        eps3 = estimate_error(point, solve_dual_weights(point, "I3"), **kw)
    return EstimatorSet(eps1, eps3)


def refinement_controller(
    budget: Budget, estimators: EstimatorSet, residual: float, delta: float
) -> Decision:
    """Accept when every error budget holds, otherwise ask for one more level.

    Budgets: ``|eta| <= c_eta * residual + tau_bar * delta``,
    ``|xi| <= tau_hat * delta`` and (Tikhonov) ``|zeta| <= zeta_bar``.
    """
    bad = []
    if abs(estimators.eta) > budget.c_eta * residual + budget.tau_bar * delta:
        bad.append("eta")
    if abs(estimators.xi) > budget.tau_hat * delta:
        bad.append("xi")
    if estimators.zeta is not None and abs(estimators.zeta) > budget.zeta_bar:
        bad.append("zeta")
    return Decision("refine" if bad else "accept", tuple(bad))


def run_refinement(
    estimate_at: Callable[[int], tuple[EstimatorSet, float]],
    budget: Budget,
    delta: float,
    max_level: int,
    start_level: int = 0,
):
    """Refine uniformly until the controller accepts.

    ``estimate_at(level)`` returns the estimators and the residual on that
    level.  Returns ``(level, decision)``; raises :class:`DwrError` when
    ``max_level`` would be exceeded.
    """
    level = start_level
    while True:
        est, residual = estimate_at(level)
        decision = refinement_controller(budget, est, residual, delta)
        if decision.accept:
            return level, decision
        if level >= max_level:
            raise DwrError(f"refinement limit {max_level} reached, violated {decision.violations}")
        level += 1
