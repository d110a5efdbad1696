"""Closed-form population dynamics of the two-step stylized model.

The state is the pair ``(p, q)``: the probability of the correct first action
and of the correct second action after a correct first action. Each step of
population gradient ascent moves the corresponding logit gap by
``eta * delta`` where

======  ==================  ==================
method  delta_p             delta_q
======  ==================  ==================
SGPO    p (1 - p)           p^2 q (1 - q)
GRPO    p (1 - p) q         p q (1 - q)
======  ==================  ==================

so that ``p' = p e^delta / (1 - p + p e^delta)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

STRICT_MARGIN = 1e-15
EQUALITY_TOL = 1e-12


class Method(str, enum.Enum):
    SGPO = "sgpo"
    GRPO = "grpo"


def _check_unit(*values):
    for v in values:
        v = np.asarray(v)
        if not np.all((v > 0.0) & (v < 1.0)):
            raise ValueError(f"argument {v!r} outside the open interval (0, 1)")


def _log_update(x, delta):
    # log(x) + delta - log(1 - x + x e^delta), with the last term as log1p(x expm1(delta)).
    return np.log(x) + delta - np.log1p(x * np.expm1(delta))


def f11(p, eta: float = 1.0):
    _check_unit(p)
    return _log_update(p, eta * p * (1 - p))


def f21(p, q, eta: float = 1.0):
    _check_unit(p, q)
    # Same operation order as f22 so that f21(p, p) == f22(p, p) bitwise.
    return _log_update(p, eta * p * q * (1 - p))


def f12(p, q, eta: float = 1.0):
    _check_unit(p, q)
    return _log_update(q, eta * p * p * q * (1 - q))


def f22(p, q, eta: float = 1.0):
    _check_unit(p, q)
    return _log_update(q, eta * p * q * (1 - q))


def population_gradient(p: float, q: float, method: Method | str) -> np.ndarray:
    """Exact expected G=2 group gradient over the four stylized logits."""
    _check_unit(p, q)
    if Method(method) is Method.SGPO:
        a, b = p * (1 - p), p * p * q * (1 - q)
    else:
        a, b = p * (1 - p) * q, p * q * (1 - q)
    return 0.5 * np.array([-a, a, -b, b])


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log(p) - (1 - p) * math.log1p(-p)


@dataclass(frozen=True)
class DynamicsState:
    p: float = 0.5
    q: float = 0.5
    method: Method = Method.SGPO
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        _check_unit(self.p, self.q)


def dynamics_step(state: DynamicsState, eta: float = 1.0) -> DynamicsState:
    p, q = state.p, state.q
    if state.method is Method.SGPO:
        p_new, q_new = math.exp(f11(p, eta)), math.exp(f12(p, q, eta))
    else:
        p_new, q_new = math.exp(f21(p, q, eta)), math.exp(f22(p, q, eta))
    p_new, q_new = float(p_new), float(q_new)
    return DynamicsState(p_new, q_new, state.method, state.k + 1)


@dataclass
class DynamicsTrace:
    method: Method
    p: list[float] = field(default_factory=list)
    q: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.p)

    @property
    def k(self) -> list[int]:
        return list(range(len(self.p)))

    @property
    def product(self) -> list[float]:
        return [a * b for a, b in zip(self.p, self.q)]

    @property
    def entropy1(self) -> list[float]:
        return [binary_entropy(a) for a in self.p]

    def records(self) -> list[tuple]:
        return [(k, p, q, p * q, binary_entropy(p)) for k, (p, q) in enumerate(zip(self.p, self.q))]


def run_dynamics(initial: DynamicsState, K: int, eta: float = 1.0) -> DynamicsTrace:
    if K < 1:
        raise ValueError("K must be at least 1")
    trace = DynamicsTrace(initial.method, [initial.p], [initial.q])
    state = initial
    for _ in range(K):
        state = dynamics_step(state, eta)
        trace.p.append(state.p)
        trace.q.append(state.q)
    return trace


def paired_traces(K: int, eta: float = 1.0) -> tuple[DynamicsTrace, DynamicsTrace]:
    """SGPO and GRPO traces from the uniform initialisation p = q = 1/2."""
    return (
        run_dynamics(DynamicsState(0.5, 0.5, Method.SGPO), K, eta),
        run_dynamics(DynamicsState(0.5, 0.5, Method.GRPO), K, eta),
    )


@dataclass
class Check:
    name: str
    passed: bool
    first_failure: Optional[int] = None
    worst_slack: float = float("inf")


@dataclass
class DominanceReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else f"FAIL at k={c.first_failure}"
            out.append(f"{c.name:<28} worst_slack={c.worst_slack:.3e}  {status}")
        return out


def _strict(name: str, lhs, rhs, margin: float) -> Check:
    worst, first = float("inf"), None
    for k in range(1, len(lhs)):
        slack = lhs[k] - rhs[k]
        worst = min(worst, slack)
        if first is None and not slack > margin:
            first = k
    return Check(name, first is None, first, worst)


def _equal(name: str, lhs, rhs, tol: float) -> Check:
    worst, first = 0.0, None
    for k in range(len(lhs)):
        gap = abs(lhs[k] - rhs[k])
        worst = max(worst, gap)
        if first is None and gap > tol:
            first = k
    # Report slack as remaining tolerance so larger is better, like the strict checks.
    return Check(name, first is None, first, tol - worst)


def check_sgpo_dominance(sgpo: DynamicsTrace, grpo: DynamicsTrace, margin: float = STRICT_MARGIN) -> DominanceReport:
    """Per-iteration separation claims for every ``k >= 1``."""
    if len(sgpo) != len(grpo):
        raise ValueError("traces must have the same length")
    return DominanceReport(
        [
            _strict("p_sgpo > p_grpo", sgpo.p, grpo.p, margin),
            _strict("pq_sgpo > pq_grpo", sgpo.product, grpo.product, margin),
            _equal("p_grpo == q_grpo", grpo.p, grpo.q, EQUALITY_TOL),
            _strict("p_sgpo > q_sgpo", sgpo.p, sgpo.q, margin),
            # Lower step-1 entropy for SGPO: negate so the check reads "grpo - sgpo > 0".
            _strict("entropy1_sgpo < entropy1_grpo", grpo.entropy1, sgpo.entropy1, margin),
        ]
    )
