"""One-pass query policies: fixed threshold, random rate, and a budget-driven
adaptive threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .numkit import RngStream, uniform01

NONE = "none"
FIXED = "fixed"
RANDOM = "random"
BUDGET = "budget"
POLICIES = (NONE, FIXED, RANDOM, BUDGET)


@dataclass(frozen=True)
class QueryDecision:
    query: bool
    score: float
    threshold_used: float


def fixed_threshold_decide(score: float, tau: float) -> QueryDecision:
    """Query iff ``score >= tau``."""
    return QueryDecision(bool(score >= tau), float(score), float(tau))


def random_decide(rate: float, rng: RngStream) -> QueryDecision:
    """Query with probability ``rate``; the uniform draw is reported as the score."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    u = uniform01(rng)
    return QueryDecision(bool(u < rate), u, float(rate))


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass
class BudgetController:
    """Drives the realized query rate toward ``B`` using only two counters."""

    B: float
    gamma_budget: float
    K: int
    queried_count: int = 0
    seen_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.B <= 1.0:
            raise ValueError("B must lie in [0, 1]")
        if not self.gamma_budget > 0:
            raise ValueError("gamma_budget must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 <= self.queried_count <= self.seen_count:
            raise ValueError("need 0 <= queried_count <= seen_count")

    @property
    def q_rate(self) -> float:
        return self.queried_count / self.seen_count if self.seen_count else 0.0

    @property
    def error(self) -> float:
        # before any event the controller is fully permissive
        return self.q_rate - self.B if self.seen_count else -self.B


def adaptive_threshold(ctrl: BudgetController) -> float:
    """Quantized threshold ``n / K`` with ``n = round(K * (B + sign(e) |e|^gamma))``.

    ``n`` is clamped to ``[0, K]`` after rounding.
    """
    e = ctrl.error
    tau_cont = ctrl.B + math.copysign(abs(e) ** ctrl.gamma_budget, e) if e != 0 else ctrl.B
    n = min(max(round_half_away(ctrl.K * tau_cont), 0), ctrl.K)
    return n / ctrl.K


def budget_decide(score: float, ctrl: BudgetController) -> QueryDecision:
    return fixed_threshold_decide(score, adaptive_threshold(ctrl))


def update_counts(ctrl: BudgetController, decision: QueryDecision) -> BudgetController:
    ctrl.seen_count += 1
    if decision.query:
        ctrl.queried_count += 1
    return ctrl
