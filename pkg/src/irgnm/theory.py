"""Constants from the convergence analysis: power inequalities, contraction
factor and the a priori bound on the discrepancy stopping index."""

from __future__ import annotations

import math
from typing import NamedTuple

__all__ = [
    "power_inequality_constant",
    "contraction_factor",
    "schedule_admissible",
    "StopBound",
    "stopping_bound",
    "initial_d",
]


def power_inequality_constant(p: float, gamma: float) -> float:
    """``C_gamma = ((1 + gamma) / gamma)**(p - 1)``.

    With this constant ``(a + b)**p <= (1 + gamma)**(p - 1) a**p + C_gamma b**p``
    for all ``a, b > 0``; it is the maximum of
    ``((1 + x)**p - (1 + gamma)**(p - 1)) / x**p`` over ``x > 0``, attained at
    ``x = gamma``.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return ((1.0 + gamma) / gamma) ** (p - 1.0)


def contraction_factor(p: float, gamma: float, c_tc: float) -> float:
    """``q = ((1 + gamma)**(p-1) + 1) / 2 * (2 c_tc / (1 - c_tc))**p``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if not 0 < c_tc < 1.0 / 3.0:
        raise ValueError(f"c_tc must lie in (0, 1/3), got {c_tc}")
    return ((1.0 + gamma) ** (p - 1.0) + 1.0) / 2.0 * (2.0 * c_tc / (1.0 - c_tc)) ** p


def schedule_admissible(p: float, gamma: float, c_tc: float, theta: float) -> bool:
    """True when ``q < theta < 1`` and ``theta > (2 c_tc / (1 - c_tc))**p``."""
    q = contraction_factor(p, gamma, c_tc)
    lower = (2.0 * c_tc / (1.0 - c_tc)) ** p
    return q < 1.0 and lower < theta < 1.0 and q < theta


class StopBound(NamedTuple):
    k_bar: float
    vacuous: bool
    reason: str = ""


def initial_d(residual0: float, p: float, c_tc: float, variant: str = "tikhonov") -> float:
    """``d_0`` from the initial residual ``||F(x_0) - y_delta||``."""
    if variant == "ivanov":
        return (1.0 - c_tc) * residual0
    return 2.0 ** (1.0 - p) * (1.0 - c_tc) ** p * residual0**p


def stopping_bound(
    *,
    p: float,
    theta: float,
    alpha0: float,
    c_tc: float,
    gamma: float,
    tau: float,
    delta: float,
    d0: float,
    R_dagger: float,
    variant: str = "tikhonov",
) -> StopBound:
    """Upper bound on the discrepancy stopping index.

    Tikhonov::

        k_bar = (p log(1/delta) + log(d0 + alpha0 R / (theta - q))
                 - log(tau_t - C / (1 - q))) / log(1/theta)

    with ``tau_t = 2**(1-p) (1-c)**p tau**p`` and
    ``C = ((1+gamma)/gamma)**(p-1) (1+c)**p``.  The Ivanov recursion is the
    ``p = 1`` case with ``q = 2c/(1-c)``, ``C = 1+c``, ``tau_t = (1-c) tau``
    and ``log(1/q)`` in place of ``log(1/theta)``.
    """
    if delta <= 0:
        return StopBound(math.inf, True, "delta must be positive")
    if not 0 < c_tc < 1.0 / 3.0:
        return StopBound(math.inf, True, "c_tc outside (0, 1/3)")

    if variant == "ivanov":
        q = 2.0 * c_tc / (1.0 - c_tc)
        C = 1.0 + c_tc
        tau_t = (1.0 - c_tc) * tau
        slack = tau_t - C / (1.0 - q)
        if slack <= 0:
            return StopBound(math.inf, True, "tau too small: (1-c) tau <= C / (1-q)")
        if d0 <= 0:
            return StopBound(0.0, False, "zero initial residual")
        k = (math.log(1.0 / delta) + math.log(d0) - math.log(slack)) / math.log(1.0 / q)
        return StopBound(k, False)

    q = contraction_factor(p, gamma, c_tc)
    if not 0 < theta < 1:
        return StopBound(math.inf, True, "theta outside (0, 1)")
    if theta <= q:
        return StopBound(math.inf, True, f"theta={theta} <= q={q:.4g}")
    C = power_inequality_constant(p, gamma) * (1.0 + c_tc) ** p
    tau_t = 2.0 ** (1.0 - p) * (1.0 - c_tc) ** p * tau**p
    slack = tau_t - C / (1.0 - q)
    if slack <= 0:
        return StopBound(math.inf, True, "tau too small: tau_tilde <= C / (1-q)")
    head = d0 + alpha0 / (theta - q) * R_dagger
    if head <= 0:
        return StopBound(0.0, False, "zero initial budget")
    k = (p * math.log(1.0 / delta) + math.log(head) - math.log(slack)) / math.log(1.0 / theta)
    return StopBound(k, False)
