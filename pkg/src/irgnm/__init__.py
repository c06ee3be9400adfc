"""Iteratively regularized Gauss-Newton solvers (Tikhonov and Ivanov form)
for an inverse source problem in a semilinear elliptic equation."""

from .fem import Field, Mesh, build_mesh, l1_norm, l2_inner, l2_norm, prolong, restrict_project
from .pde import PdeProblem, apply_forward_map, solve_forward, solve_linearized, solve_mu_tilde
from .solver import IrgnmConfig, IrgnmResult, IterationRecord, run_irgnm

__all__ = [
    "Field",
    "Mesh",
    "build_mesh",
    "l1_norm",
    "l2_inner",
    "l2_norm",
    "prolong",
    "restrict_project",
    "PdeProblem",
    "apply_forward_map",
    "solve_forward",
    "solve_linearized",
    "solve_mu_tilde",
    "IrgnmConfig",
    "IrgnmResult",
    "IterationRecord",
    "run_irgnm",
]
