"""One Gauss-Newton step: the linearized misfit minimized over the source.

The state increment ``v`` is eliminated through the linearized equation, so
the step becomes a dense convex problem in the control values

    q(s) = ||chi_o (u + G (s - s_k) - y)||^2

with ``G = (-Lap + 3 kappa u^2)^{-1} M chi_c``.  The Ivanov step minimizes
``q / 2`` over the box ``|s_i| <= rho``; the Tikhonov step minimizes
``q + alpha * sum_i w_i |s_i|``.

Both solvers start with a primal-dual active set sweep (which usually lands
on the exact solution), then alternate a projected (resp. proximal)
gradient step with Barzilai-Borwein length and a Newton step on the current
free set until the optimality residual is below tolerance.
Optimality is measured in the metric of the vertex weights ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .fem import Field
from .pde import PdeProblem, adjoint_state

__all__ = [
    "QuadraticStep",
    "StepResult",
    "ReducedProblem",
    "InnerSolverError",
    "reduce_step",
    "solve_ivanov_step",
    "solve_tikhonov_step",
    "box_qp",
    "l1_qp",
]

ARMIJO = 1e-4


class InnerSolverError(RuntimeError):
    def __init__(self, message: str, iterations: int, kkt_residual: float):
        super().__init__(f"{message} (iterations={iterations}, kkt={kkt_residual:.3e})")
        self.iterations = iterations
        self.kkt_residual = kkt_residual


@dataclass(frozen=True, eq=False)
class QuadraticStep:
    problem: PdeProblem
    linearization_state: Field
    current_source: Field
    data: Field
    misfit_power: float = 2.0

    def __post_init__(self):
        mesh = self.problem.mesh
        for f in (self.linearization_state, self.current_source, self.data):
            if f.mesh.n_per_side != mesh.n_per_side:
                raise ValueError("step fields must share the problem mesh")
        if self.misfit_power != 2.0:
            raise NotImplementedError("only the quadratic misfit (p = 2) is solved")


@dataclass
class StepResult:
    s_next: Field
    v: Field
    lam: Field
    kkt_residual: float
    active_set_size: int
    objective: float
    iterations: int


@dataclass(frozen=True, eq=False)
class ReducedProblem:
    """``q(x) = x'Hx/2 + g'x + c`` in the control values ``x``.

    ``H`` and ``g`` describe the full (unhalved) misfit, ``w`` holds the
    vertex weights of the control nodes.
    """

    H: np.ndarray
    g: np.ndarray
    c: float
    w: np.ndarray
    x_k: np.ndarray

    def misfit(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.H @ x) + self.g @ x + self.c)


def reduce_step(step: QuadraticStep) -> ReducedProblem:
    problem = step.problem
    mesh = problem.mesh
    I = mesh.interior
    ctrl = problem.control_dofs
    u = step.linearization_state.values
    x_k = step.current_source.values[ctrl]

    lu = splu(problem.linearized_operator(u))
    B = lu.solve(problem.mass[I][:, ctrl].toarray())  # interior v per unit control
    Mo = problem.observed_mass
    MoB = Mo[:, I] @ B
    H = 2.0 * (B.T @ MoB[I])
    H = 0.5 * (H + H.T)
    # residual at x = 0: u - y - G x_k
    r0 = u - step.data.values
    r0[I] -= B @ x_k
    g = 2.0 * (MoB.T @ r0)
    c = float(r0 @ (Mo @ r0))
    return ReducedProblem(H, g, c, mesh.weights[ctrl], x_k)


def _free_newton(Q: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``Q d = -rhs`` for a symmetric PSD ``Q`` (tiny ridge if singular)."""
    if Q.shape[0] == 0:
        return np.zeros(0)
    ridge = 1e-14 * max(float(np.max(np.diag(Q))), 1e-300)
    try:
        return -sla.cho_solve(sla.cho_factor(Q + ridge * np.eye(len(Q))), rhs)
    except np.linalg.LinAlgError:
        return -sla.lstsq(Q, rhs)[0]


def _pdas_box(Q, b, lo, hi, w, x, max_iter=100):
    """Primal-dual active set iteration; returns the best feasible point seen."""
    def f(z):
        return 0.5 * z @ (Q @ z) + b @ z

    lam = -(Q @ x + b) / w
    best, f_best = x, f(x)
    seen = set()
    for _ in range(max_iter):
        up = lam + (x - hi) > 0
        down = lam + (x - lo) < 0
        key = (up.tobytes(), down.tobytes())
        if key in seen:
            break
        seen.add(key)
        F = np.flatnonzero(~(up | down))
        z = np.where(up, hi, np.where(down, lo, 0.0))
        rhs = b[F] + Q[F] @ z
        z[F] = _free_newton(Q[np.ix_(F, F)], rhs)
        lam = -(Q @ z + b) / w
        lam[F] = 0.0
        x = z
        zc = np.clip(z, lo, hi)
        fz = f(zc)
        if fz < f_best:
            best, f_best = zc, fz
        if np.all(z[F] >= lo[F]) and np.all(z[F] <= hi[F]) and not (
            np.any(lam[up] < 0) or np.any(lam[down] > 0)
        ):
            break
    return best


def box_qp(Q, b, lo, hi, w, x0, tol=1e-8, max_iter=10_000):
    """Minimize ``x'Qx/2 + b'x`` over ``lo <= x <= hi``.

    Returns ``(x, kkt, iterations)`` where ``kkt`` is the max-norm of
    ``x - clip(x - grad / w)``.
    """
    def f(x):
        return 0.5 * x @ (Q @ x) + b @ x

    def kkt_of(x, g):
        return float(np.max(np.abs(x - np.clip(x - g / w, lo, hi)), initial=0.0))

    x = np.clip(np.asarray(x0, float), lo, hi)
    x = _pdas_box(Q, b, lo, hi, w, x)
    g = Q @ x + b
    fx = f(x)
    t = 1.0
    x_prev = g_prev = None
    kkt = kkt_of(x, g)
    for it in range(1, max_iter + 1):
        if kkt <= tol:
            return x, kkt, it - 1
        # gradient projection, BB length in the w-metric
        if x_prev is not None:
            dx, dg = x - x_prev, g - g_prev
            curv = dx @ dg
            if curv > 0:
                t = float((dx * w) @ dx / curv)
        x_prev, g_prev = x, g
        while True:
            xt = np.clip(x - t * g / w, lo, hi)
            ft = f(xt)
            if ft <= fx + ARMIJO * g @ (xt - x) or t < 1e-30:
                break
            t *= 0.5
        x, fx = xt, ft
        g = Q @ x + b

        # Newton step on the free set
        gw = g / w
        free = ~(((x <= lo) & (gw > 0)) | ((x >= hi) & (gw < 0)))
        F = np.flatnonzero(free)
        d = np.zeros_like(x)
        d[F] = _free_newton(Q[np.ix_(F, F)], g[F])
        beta = 1.0
        for _ in range(60):
            xt = np.clip(x + beta * d, lo, hi)
            ft = f(xt)
            if ft <= fx + ARMIJO * g @ (xt - x):
                x, fx = xt, ft
                g = Q @ x + b
                break
            beta *= 0.5
        kkt = kkt_of(x, g)
    if kkt <= tol:
        return x, kkt, max_iter
    raise InnerSolverError("box QP iteration cap reached", max_iter, kkt)


def _soft(z, thr):
    return np.sign(z) * np.maximum(np.abs(z) - thr, 0.0)


def _pdas_l1(Q, b, alpha, w, x, max_iter=100):
    """Primal-dual active set iteration for the L1 problem (best point seen)."""
    def total(z):
        return 0.5 * z @ (Q @ z) + b @ z + alpha * w @ np.abs(z)

    lam = -(Q @ x + b) / w
    best, f_best = x, total(x)
    seen = set()
    for _ in range(max_iter):
        pos = lam + x > alpha
        neg = lam + x < -alpha
        key = (pos.tobytes(), neg.tobytes())
        if key in seen:
            break
        seen.add(key)
        sigma = pos.astype(float) - neg.astype(float)
        F = np.flatnonzero(sigma)
        z = np.zeros_like(x)
        z[F] = _free_newton(Q[np.ix_(F, F)], b[F] + alpha * w[F] * sigma[F])
        lam = -(Q @ z + b) / w
        lam[F] = alpha * sigma[F]
        x = z
        # drop components whose sign disagrees with the predicted orthant
        zc = np.where(np.sign(z) == sigma, z, 0.0)
        fz = total(zc)
        if fz < f_best:
            best, f_best = zc, fz
    return best


def l1_qp(Q, b, alpha, w, x0, tol=1e-8, max_iter=10_000):
    """Minimize ``x'Qx/2 + b'x + alpha * sum w_i |x_i|``.

    Returns ``(x, kkt, iterations)`` with ``kkt`` the max-norm of the
    natural residual ``x - soft(x - grad / w, alpha)``.
    """
    def smooth(x):
        return 0.5 * x @ (Q @ x) + b @ x

    def total(x):
        return smooth(x) + alpha * w @ np.abs(x)

    def kkt_of(x, g):
        return float(np.max(np.abs(x - _soft(x - g / w, alpha)), initial=0.0))

    x = _pdas_l1(Q, b, alpha, w, np.asarray(x0, float).copy())
    g = Q @ x + b
    Fx = total(x)
    t = 1.0
    x_prev = g_prev = None
    kkt = kkt_of(x, g)
    for it in range(1, max_iter + 1):
        if kkt <= tol:
            return x, kkt, it - 1
        if x_prev is not None:
            dx, dg = x - x_prev, g - g_prev
            curv = dx @ dg
            if curv > 0:
                t = float((dx * w) @ dx / curv)
        x_prev, g_prev = x, g
        sx = smooth(x)
        while True:
            xt = _soft(x - t * g / w, t * alpha)
            dx = xt - x
            if smooth(xt) <= sx + g @ dx + 0.5 * (dx * w) @ dx / t or t < 1e-30:
                break
            t *= 0.5
        x, Fx = xt, total(xt)
        g = Q @ x + b

        # Newton step on the orthant selected by the current signs
        gw = g / w
        sigma = np.sign(x)
        zero = sigma == 0
        sigma[zero & (gw < -alpha)] = 1.0
        sigma[zero & (gw > alpha)] = -1.0
        F = np.flatnonzero(sigma)
        d = np.zeros_like(x)
        rhs = g[F] + alpha * w[F] * sigma[F]
        d[F] = _free_newton(Q[np.ix_(F, F)], rhs)
        beta = 1.0
        for _ in range(60):
            xt = x + beta * d
            xt[np.sign(xt) != sigma] = 0.0
            Ft = total(xt)
            if Ft <= Fx + ARMIJO * (g + alpha * w * sigma) @ (xt - x):
                x, Fx = xt, Ft
                g = Q @ x + b
                break
            beta *= 0.5
        kkt = kkt_of(x, g)
    if kkt <= tol:
        return x, kkt, max_iter
    raise InnerSolverError("L1 problem iteration cap reached", max_iter, kkt)


def _finish(step: QuadraticStep, red: ReducedProblem, x, kkt, iters, active, objective):
    problem = step.problem
    ctrl = problem.control_dofs
    s_next = np.zeros(problem.mesh.n_nodes)
    s_next[ctrl] = x
    ds = s_next - step.current_source.values
    load = problem.source_load(ds)
    v = problem.embed(splu(problem.linearized_operator(step.linearization_state.values)).solve(load))
    v = Field(problem.mesh, v)
    lam = adjoint_state(problem, step.linearization_state, v, step.data)
    return StepResult(Field(problem.mesh, s_next), v, lam, kkt, active, objective, iters)


def solve_ivanov_step(
    step: QuadraticStep, rho: float, tol: float = 1e-8, max_iter: int = 10_000
) -> StepResult:
    """Minimize ``||u + v - y||^2 / 2`` subject to ``|s_i| <= rho``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    red = reduce_step(step)
    n = len(red.w)
    lo, hi = -rho * np.ones(n), rho * np.ones(n)
    # the half misfit has Hessian H/2 and gradient g/2
    x, kkt, iters = box_qp(0.5 * red.H, 0.5 * red.g, lo, hi, red.w, red.x_k, tol, max_iter)
    x = np.clip(x, -rho, rho)
    active = int(np.count_nonzero(np.abs(x) >= rho))
    res = _finish(step, red, x, kkt, iters, active, 0.5 * red.misfit(x))
    return res


def solve_tikhonov_step(
    step: QuadraticStep, alpha: float, tol: float = 1e-8, max_iter: int = 10_000
) -> StepResult:
    """Minimize ``||u + v - y||^2 + alpha ||s||_1`` (vertex-quadrature L1 norm)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    red = reduce_step(step)
    x, kkt, iters = l1_qp(red.H, red.g, alpha, red.w, red.x_k, tol, max_iter)
    zeros = int(np.count_nonzero(x == 0.0))
    objective = red.misfit(x) + alpha * float(red.w @ np.abs(x))
    return _finish(step, red, x, kkt, iters, zeros, objective)
