"""Noise calibration for the Gaussian mechanism and DP-SGD style training.

Natural logarithms throughout. The moments-accountant bound used here is
the closed form obtained by fixing lambda = sigma^2 in the tail bound
``delta = min_lambda exp(alpha(lambda) - lambda * eps)`` with
``alpha(lambda) <= T q^2 lambda^2 / sigma^2``.

The general DP-SGD statement ``sigma >= c2 * q * sqrt(T log(1/delta)) / eps``
carries unspecified constants and is therefore not computed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class DpBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class DpMechanismParams:
    sigma: float
    clip: float
    q: float
    steps: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.clip > 0:
            raise ValueError("clip bound must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("sampling rate q must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def _budget(budget_or_eps, delta=None) -> DpBudget:
    if isinstance(budget_or_eps, DpBudget):
        return budget_or_eps
    return DpBudget(float(budget_or_eps), float(delta))


def gaussian_sigma(budget, delta=None) -> float:
    """Noise multiplier sqrt(2 ln(1.25/delta)) / eps of the Gaussian mechanism."""
    b = _budget(budget, delta)
    return math.sqrt(2.0 * math.log(1.25 / b.delta)) / b.epsilon


def simplified_sigma(budget, delta=None) -> float:
    """sqrt(2 ln(1/delta) / eps), valid whenever T q^2 <= eps / 2."""
    b = _budget(budget, delta)
    return math.sqrt(-2.0 * math.log(b.delta) / b.epsilon)


def tailbound_sigma(budget, q, steps, delta=None) -> float:
    """sqrt(ln(delta) / (T q^2 - eps)); requires T q^2 < eps."""
    b = _budget(budget, delta)
    denom = steps * q * q - b.epsilon
    if denom >= 0:
        raise ValueError(f"tail bound needs T*q^2 < epsilon (T*q^2 = {steps * q * q}, epsilon = {b.epsilon})")
    return math.sqrt(math.log(b.delta) / denom)


def check_budget(q, steps, epsilon) -> bool:
    """True iff T q^2 <= eps / 2 (up to a 1e-12 relative slack for decimal inputs)."""
    lhs = steps * q * q
    rhs = epsilon / 2.0
    return lhs <= rhs or math.isclose(lhs, rhs, rel_tol=1e-12)


def epsilon_for_sigma(sigma, delta) -> float:
    """Invert the simplified bound: the eps reached by noise ``sigma`` at ``delta``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return -2.0 * math.log(delta) / (sigma * sigma)


def compose_parallel(budgets) -> DpBudget:
    """Guarantee of mechanisms run on disjoint data: coordinate-wise maximum."""
    budgets = list(budgets)
    if not budgets:
        raise ValueError("compose_parallel needs at least one budget")
    return DpBudget(max(b.epsilon for b in budgets), max(b.delta for b in budgets))
