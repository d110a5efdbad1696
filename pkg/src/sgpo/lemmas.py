"""Dense-grid numeric certification of the monotonicity, concavity and
comparison inequalities behind the SGPO/GRPO separation result.

Every checker returns a :class:`LemmaReport`. Strict inequalities must hold
with slack at least ``margin``; slacks are difference quotients (first or
second), so they estimate derivatives and do not shrink with grid spacing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from sgpo.dynamics import DynamicsTrace, Method, f11, f21

DEFAULT_MARGIN = 1e-12
MAX_STORED_VIOLATIONS = 100


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid on ``[lower + h, upper - h]`` per axis, ``h`` one step.

    Doubling ``resolution + 1`` nests grids: resolution ``2n + 1`` contains
    every point of resolution ``n``.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    resolution: int = 100
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise ValueError("lower and upper must have the same dimension")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("each lower bound must be below its upper bound")
        if self.resolution < 100:
            raise ValueError("resolution must be at least 100")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def ndim(self) -> int:
        return len(self.lower)

    def step(self, axis: int = 0) -> float:
        return (self.upper[axis] - self.lower[axis]) / (self.resolution + 1)

    def axis(self, axis: int = 0) -> np.ndarray:
        return self.lower[axis] + self.step(axis) * np.arange(1, self.resolution + 1)

    def refined(self) -> "GridSpec":
        return GridSpec(self.lower, self.upper, 2 * self.resolution + 1, self.margin)


@dataclass
class LemmaReport:
    lemma_id: str
    points: int
    min_slack: float
    margin: float = DEFAULT_MARGIN
    violations: list[tuple[tuple, float]] = field(default_factory=list)
    n_violations: int = 0

    @property
    def passed(self) -> bool:
        return self.n_violations == 0 and self.min_slack >= self.margin

    def line(self) -> str:
        return f"{self.lemma_id:<14} points={self.points:<9d} min_slack={self.min_slack:.6e}  {'PASS' if self.passed else 'FAIL'}"

    def merge(self, other: "LemmaReport") -> "LemmaReport":
        return LemmaReport(
            self.lemma_id,
            self.points + other.points,
            min(self.min_slack, other.min_slack),
            max(self.margin, other.margin),
            (self.violations + other.violations)[:MAX_STORED_VIOLATIONS],
            self.n_violations + other.n_violations,
        )


def _report(lemma_id: str, slack: np.ndarray, coords: Sequence[np.ndarray], margin: float, points: int) -> LemmaReport:
    slack = np.asarray(slack, dtype=float)
    coords = [np.broadcast_to(np.asarray(c, dtype=float), slack.shape).ravel() for c in coords]
    slack = slack.ravel()
    bad = np.flatnonzero(~(slack >= margin))
    stored = [(tuple(float(c[i]) for c in coords), float(slack[i])) for i in bad[:MAX_STORED_VIOLATIONS]]
    if slack.size == 0:
        min_slack = float("inf")
    elif np.isnan(slack).any():
        min_slack = float("nan")
    else:
        min_slack = float(slack.min())
    return LemmaReport(lemma_id, points, min_slack, margin, stored, int(bad.size))


# -- one-dimensional monotonicity and concavity --------------------------------------


def check_increasing_1d(lemma_id: str, func: Callable, grid: GridSpec) -> LemmaReport:
    """Forward difference quotients and central-difference derivatives positive."""
    x = grid.axis(0)
    h = grid.step(0)
    y = func(x)
    forward = np.diff(y) / h
    central = (y[2:] - y[:-2]) / (2 * h)
    mid = 0.5 * (x[1:] + x[:-1])
    fwd = _report(lemma_id, forward, [mid], grid.margin, x.size)
    ctr = _report(lemma_id, central, [x[1:-1]], grid.margin, 0)
    return fwd.merge(ctr)


def verify_f11_increasing(grid: Optional[GridSpec] = None, func: Callable = f11) -> LemmaReport:
    grid = grid or GridSpec((0.0,), (1.0,), 10_000)
    return check_increasing_1d("monotone-i", func, grid)


def verify_phi_concave(grid: Optional[GridSpec] = None, func: Optional[Callable] = None) -> LemmaReport:
    """Second difference quotients of ``phi(x) = log(1 + exp(-e^x))`` negative."""
    grid = grid or GridSpec((-10.0,), (-0.01,), 10_000)
    func = func or phi
    x = grid.axis(0)
    h = grid.step(0)
    y = func(x)
    second = (y[2:] - 2 * y[1:-1] + y[:-2]) / (h * h)
    return _report("monotone-iv", -second, [x[1:-1]], grid.margin, x.size)


def phi(x):
    return np.log1p(np.exp(-np.exp(x)))


# -- two-dimensional monotonicity -----------------------------------------------------------


def hp(p, x):
    """``h_p(x) = x - log(1 - p + p e^x)``."""
    return x - np.log1p(p * np.expm1(x))


def hp_prime(p, x):
    return (1 - p) / (1 - p + p * np.exp(x))


def verify_hp_increasing(
    grid: Optional[GridSpec] = None, func: Callable = hp, derivative: Optional[Callable] = hp_prime
) -> LemmaReport:
    """``h_p`` increasing in ``x`` for every grid ``p``; closed-form derivative positive."""
    grid = grid or GridSpec((0.0, -5.0), (1.0, 5.0), 100)
    p = grid.axis(0)[:, None]
    x = grid.axis(1)[None, :]
    h = grid.step(1)
    vals = func(p, x)
    forward = np.diff(vals, axis=1) / h
    xm = 0.5 * (x[:, 1:] + x[:, :-1])
    n = grid.resolution**2
    report = _report("monotone-ii", forward, [np.broadcast_to(p, forward.shape), np.broadcast_to(xm, forward.shape)], grid.margin, n)
    if derivative is not None:
        d = derivative(p, x)
        shape = np.broadcast_shapes(p.shape, x.shape)
        report = report.merge(
            _report("monotone-ii", np.broadcast_to(d, shape), [np.broadcast_to(p, shape), np.broadcast_to(x, shape)], grid.margin, 0)
        )
    return report


def verify_f21_increasing(grid: Optional[GridSpec] = None, func: Callable = f21) -> LemmaReport:
    """Both partial difference quotients of ``f21`` positive on the unit square."""
    grid = grid or GridSpec((0.0, 0.0), (1.0, 1.0), 100)
    p = grid.axis(0)[:, None]
    q = grid.axis(1)[None, :]
    vals = func(p, q)
    dp = np.diff(vals, axis=0) / grid.step(0)
    dq = np.diff(vals, axis=1) / grid.step(1)
    n = grid.resolution**2
    pm = 0.5 * (p[1:] + p[:-1])
    qm = 0.5 * (q[:, 1:] + q[:, :-1])
    rp = _report("monotone-iii", dp, [np.broadcast_to(pm, dp.shape), np.broadcast_to(q, dp.shape)], grid.margin, n)
    rq = _report("monotone-iii", dq, [np.broadcast_to(p, dq.shape), np.broadcast_to(qm, dq.shape)], grid.margin, 0)
    return rp.merge(rq)


# -- the product-comparison inequality ------------------------------------------------------


def _excess(x, y):
    """``(1/x - 1) e^{-y}``, the part of the A/B/C functions above 1."""
    return (1.0 / x - 1.0) * np.exp(-y)


def abc_functions(x, y):
    """Return ``(A(x), B(x, y), C(sqrt(xy)))``."""
    z = np.sqrt(x * y)
    return (
        1 + _excess(x, x * (1 - x)),
        1 + _excess(y, x * x * y * (1 - y)),
        1 + _excess(z, z * z * (1 - z)),
    )


def keyabc_slack(x, y):
    """``C(sqrt(xy))^2 - A(x) B(x, y)`` evaluated without cancelling the leading 1s."""
    z = np.sqrt(x * y)
    a = _excess(x, x * (1 - x))
    b = _excess(y, x * x * y * (1 - y))
    c = _excess(z, z * z * (1 - z))
    return (2 * c - a - b) + (c * c - a * b)


def verify_keyABC(grid: Optional[GridSpec] = None, slack_fn: Callable = keyabc_slack, extended: bool = False) -> LemmaReport:
    """Check the inequality on the triangle ``lower < y < x < upper``.

    ``extended`` widens the default domain to ``4/9 < y < x < 1``.
    """
    if grid is None:
        lo = 4.0 / 9.0 if extended else 0.5
        grid = GridSpec((lo,), (1.0,), 500)
    g = grid.axis(0)
    X, Y = np.meshgrid(g, g, indexing="ij")
    mask = Y < X
    x, y = X[mask], Y[mask]
    return _report("keyABC", slack_fn(x, y), [x, y], grid.margin, int(mask.sum()))


# -- dynamics and base case -----------------------------------------------------------------


def verify_dynamics_lemma(trace: DynamicsTrace, margin: float = 1e-15, tol: float = 1e-12) -> LemmaReport:
    """Iterates in (0, 1); strictly increasing and in (1/2, 1) for k >= 1;
    p > q for SGPO. A GRPO trace is instead checked for p = q within ``tol``.

    Every family shares ``margin`` as its minimum slack.
    """
    p = np.asarray(trace.p)
    q = np.asarray(trace.q)
    k = np.arange(p.size)
    lemma = f"dynamics-{Method(trace.method).value}"
    inside = np.minimum(np.minimum(p, 1 - p), np.minimum(q, 1 - q))
    increase = np.minimum(np.diff(p), np.diff(q))
    upper_half = np.minimum(np.minimum(p[1:] - 0.5, 1 - p[1:]), np.minimum(q[1:] - 0.5, 1 - q[1:]))
    out = _report(lemma, inside, [k], margin, p.size)
    out = out.merge(_report(lemma, increase, [k[1:]], margin, 0))
    out = out.merge(_report(lemma, upper_half, [k[1:]], margin, 0))
    if Method(trace.method) is Method.SGPO:
        out = out.merge(_report(lemma, p[1:] - q[1:], [k[1:]], margin, 0))
    else:
        out = out.merge(_report(lemma, tol - np.abs(p - q), [k], margin, 0))
    return out


def basecase_slack(mid: float = 1 / 8, left: float = 1 / 4, right: float = 1 / 16) -> float:
    """``2 log(1 + e^{-mid}) - log(1 + e^{-left}) - log(1 + e^{-right})``."""
    return 2 * math.log1p(math.exp(-mid)) - math.log1p(math.exp(-left)) - math.log1p(math.exp(-right))


def verify_basecase_inequality(mid: float = 1 / 8, left: float = 1 / 4, right: float = 1 / 16, margin: float = DEFAULT_MARGIN) -> LemmaReport:
    """Concavity comparison behind ``sqrt(p1 q1) > p_grpo(1)`` after one step."""
    slack = basecase_slack(mid, left, right)
    # Equivalent product form: sqrt(sigmoid(left) sigmoid(right)) vs sigmoid(mid).
    prod = math.sqrt(1 / (1 + math.exp(-left)) / (1 + math.exp(-right))) - 1 / (1 + math.exp(-mid))
    report = _report("basecase", np.array([slack]), [np.array([mid])], margin, 1)
    if (slack > 0) != (prod > 0):
        report.n_violations += 1
        report.violations.append(((mid, left, right), prod))
    return report
