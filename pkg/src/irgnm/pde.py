"""Semilinear model problem ``-Lap u + kappa u^3 = chi_c s`` with ``u = 0`` on the boundary.

Discretization: P1 elements, consistent mass for the source load and for the
L2 misfit, vertex quadrature for the cubic reaction (so its derivative is the
diagonal matrix ``3 kappa W u^2``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import Field, Mesh, assemble_stiffness, l2_norm, refine

__all__ = [
    "PdeProblem",
    "NewtonReport",
    "NewtonError",
    "solve_forward",
    "solve_linearized",
    "solve_mu_tilde",
    "apply_forward_map",
    "forward_residual",
    "misfit_norm",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PdeProblem:
    kappa: float
    mesh: Mesh
    control_mask: np.ndarray | None = None
    observation_mask: np.ndarray | None = None

    def __post_init__(self):
        for name in ("control_mask", "observation_mask"):
            m = getattr(self, name)
            m = np.ones(self.mesh.n_nodes, bool) if m is None else np.asarray(m, bool)
            if m.shape != (self.mesh.n_nodes,):
                raise ValueError(f"{name} must have one entry per node")
            object.__setattr__(self, name, m)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return assemble_stiffness(self.mesh).matrix

    @cached_property
    def K_ii(self) -> sp.csc_matrix:
        I = self.mesh.interior
        return self.stiffness[I][:, I].tocsc()

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return self.mesh.mass

    @cached_property
    def observed_mass(self) -> sp.csr_matrix:
        """Mass matrix of the observation restriction, ``D_o M D_o``."""
        d = sp.diags(self.observation_mask.astype(float))
        return (d @ self.mass @ d).tocsr()

    @cached_property
    def w_int(self) -> np.ndarray:
        return self.mesh.weights[self.mesh.interior]

    @property
    def control_dofs(self) -> np.ndarray:
        return np.flatnonzero(self.control_mask)

    def source_load(self, s: np.ndarray) -> np.ndarray:
        """Interior load vector ``int chi_c s phi_i``."""
        return (self.mass @ (self.control_mask * s))[self.mesh.interior]

    def linearized_operator(self, u_lin: np.ndarray) -> sp.csc_matrix:
        """Interior block of ``-Lap + 3 kappa u_lin^2``."""
        u = u_lin[self.mesh.interior]
        return (self.K_ii + sp.diags(3.0 * self.kappa * self.w_int * u * u)).tocsc()

    def embed(self, interior_values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.mesh.n_nodes)
        out[self.mesh.interior] = interior_values
        return out

    def refined(self) -> "PdeProblem":
        """Same problem on the uniformly refined mesh (masks by interpolation)."""
        from .fem import prolong

        fine = refine(self.mesh)

        def up(mask):
            return prolong(Field(self.mesh, mask.astype(float)), fine).values > 0.5

        return PdeProblem(self.kappa, fine, up(self.control_mask), up(self.observation_mask))


@dataclass
class NewtonReport:
    iterations: int = 0
    initial_residual: float = 0.0
    final_residual: float = 0.0
    damping_steps: list[float] = field(default_factory=list)
    history: list[float] = field(default_factory=list)
    residual_norm: str = "lumped dual norm sqrt(sum r_i^2 / w_i)"

    @property
    def reduction(self) -> float:
        if self.initial_residual == 0.0:
            return 0.0
        return self.final_residual / self.initial_residual


class NewtonError(RuntimeError):
    def __init__(self, message: str, report: NewtonReport):
        super().__init__(message)
        self.report = report


def forward_residual(problem: PdeProblem, s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Interior residual of the discrete state equation."""
    I = problem.mesh.interior
    ui = u[I]
    return (
        problem.K_ii @ ui
        + problem.kappa * problem.w_int * ui**3
        - problem.source_load(s)
    )


def _dual_norm(problem: PdeProblem, r: np.ndarray) -> float:
    return float(np.sqrt(np.sum(r * r / problem.w_int)))


def _roundoff_level(problem: PdeProblem, s: np.ndarray, u: np.ndarray) -> float:
    # residuals below this are indistinguishable from rounding in their terms
    ui = u[problem.mesh.interior]
    terms = np.abs(problem.K_ii) @ np.abs(ui) + problem.kappa * problem.w_int * np.abs(ui) ** 3
    terms += np.abs(problem.source_load(s))
    return 1e3 * np.finfo(float).eps * _dual_norm(problem, terms)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Field) else np.asarray(x, dtype=float)


def solve_forward(
    problem: PdeProblem,
    s: Field,
    u0: Field | None = None,
    *,
    rtol: float = 1e-4,
    atol: float = 0.0,
    max_newton: int = 50,
) -> tuple[Field, NewtonReport]:
    """Damped Newton iteration for the state equation.

    Stops once the residual has dropped by ``rtol`` relative to the initial
    guess (or below ``atol``).  Steps are halved until the residual norm
    decreases.
    """
    mesh = problem.mesh
    sv = _values(s)
    u = np.zeros(mesh.n_nodes) if u0 is None else _values(u0).copy()
    u[mesh.boundary_mask] = 0.0
    I = mesh.interior

    r = forward_residual(problem, sv, u)
    norm = _dual_norm(problem, r)
    report = NewtonReport(initial_residual=norm, final_residual=norm, history=[norm])
    target = max(rtol * norm, atol)

    while norm > target:
        if report.iterations >= max_newton:
            raise NewtonError(f"no convergence after {max_newton} Newton steps", report)
        du = splu(problem.linearized_operator(u)).solve(r)
        step = 1.0
        while True:
            trial = u.copy()
            trial[I] -= step * du
            r_trial = forward_residual(problem, sv, trial)
            n_trial = _dual_norm(problem, r_trial)
            if n_trial < norm or n_trial <= target:
                break
            step *= 0.5
            if step < 2.0**-30:
                if norm <= _roundoff_level(problem, sv, u):
                    # stagnation at rounding level counts as converged
                    return Field(mesh, u), report
                raise NewtonError("line search failed to reduce the residual", report)
        u, r, norm = trial, r_trial, n_trial
        report.iterations += 1
        report.damping_steps.append(step)
        report.final_residual = norm
        report.history.append(norm)

    return Field(mesh, u), report


def solve_linearized(problem: PdeProblem, u_lin: Field, rhs: Field) -> Field:
    """Solve ``(-Lap + 3 kappa u_lin^2) v = rhs`` with homogeneous Dirichlet data."""
    load = (problem.mass @ _values(rhs))[problem.mesh.interior]
    return Field(problem.mesh, _solve_load(problem, _values(u_lin), load))


def _solve_load(problem: PdeProblem, u_lin: np.ndarray, load: np.ndarray) -> np.ndarray:
    return problem.embed(splu(problem.linearized_operator(u_lin)).solve(load))


def adjoint_state(problem: PdeProblem, u_lin: Field, v: Field, y_delta: Field) -> Field:
    """Multiplier ``lambda`` of the linearized constraint.

    Solves ``-Lap lam + 3 kappa u^2 lam = -2 chi_o (v + u - y)``.
    """
    r = _values(v) + _values(u_lin) - _values(y_delta)
    load = -2.0 * (problem.observed_mass @ r)[problem.mesh.interior]
    return Field(problem.mesh, _solve_load(problem, _values(u_lin), load))


def solve_mu_tilde(
    problem: PdeProblem, u_lin: Field, v: Field, lam: Field, y_delta: Field
) -> Field:
    """Multiplier of the state equation for the linearization point.

    ``-Lap mu + 3 kappa u^2 mu = -6 kappa u v lam - 2 chi_o (v + u - y)``
    """
    u, vv, lv = _values(u_lin), _values(v), _values(lam)
    I = problem.mesh.interior
    load = -6.0 * problem.kappa * problem.w_int * (u * vv * lv)[I]
    load -= 2.0 * (problem.observed_mass @ (vv + u - _values(y_delta)))[I]
    return Field(problem.mesh, _solve_load(problem, u, load))


def apply_forward_map(problem: PdeProblem, s: Field, u0: Field | None = None, **kw) -> Field:
    """``F(s)``: the state restricted to the observation region."""
    u, _ = solve_forward(problem, s, u0, **kw)
    return Field(problem.mesh, u.values * problem.observation_mask)


def misfit_norm(problem: PdeProblem, u: Field, y: Field) -> float:
    """``||C(u) - y||_{L2(omega_o)}``."""
    d = (_values(u) - _values(y)) * problem.observation_mask
    return l2_norm(problem.mesh, Field(problem.mesh, d))
