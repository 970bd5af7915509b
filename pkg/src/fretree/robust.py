"""Worst-case expectations over a chi-square divergence ball.

For values ``v`` and nominal weights ``p`` the inner problem

    min_q  sum q_i v_i   s.t.  sum (p_i - q_i)^2 / q_i <= theta,  sum q_i = 1

has the stationary solution ``q_i = p_i sqrt(mu1 / (v_i + mu1 + mu2))``.
Writing ``t = mu1 + mu2``, the normalization fixes ``mu1`` given ``t`` and
the divergence is decreasing in ``t``, so one bisection on ``t`` (in log
coordinates of ``t + min v``) makes the divergence constraint active.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dp import PolicySolution, StageModel, TrajectorySet, backward_solve, nominal_expectation
from .errors import DomainError, DualSolveError

INVARIANT_TOL = 1e-8


@dataclass(frozen=True)
class AmbiguitySet:
    nominal: np.ndarray
    theta: float

    def __post_init__(self):
        p = np.asarray(self.nominal, dtype=float)
        object.__setattr__(self, "nominal", p)
        if p.ndim != 1 or len(p) < 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DomainError("nominal weights must form a probability vector")
        if not self.theta >= 0:
            raise DomainError(f"theta must be nonnegative, got {self.theta}")


@dataclass(frozen=True)
class DualSolution:
    mu1: float
    mu2: float
    y: np.ndarray
    q: np.ndarray
    value: float
    divergence: float
    dual_value: float

    @property
    def gap(self) -> float:
        return abs(self.value - self.dual_value)

    def to_dict(self) -> dict:
        return {"mu1": self.mu1, "mu2": self.mu2, "y": self.y.tolist(), "q": self.q.tolist(),
                "value": self.value, "divergence": self.divergence, "dual_value": self.dual_value}


def chi2_divergence(p, q) -> np.ndarray:
    """Row-wise ``sum (p - q)^2 / q`` over entries with positive nominal weight."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, (p - q) ** 2 / q, 0.0)
    return terms.sum(axis=-1)


def _weights(h, p):
    """Worst-case weights and ``mu1`` for shifted values ``h = v + t > 0``."""
    r = np.where(p > 0, p / np.sqrt(np.where(p > 0, h, 1.0)), 0.0)
    norm = r.sum(axis=-1, keepdims=True)
    return r / norm, 1.0 / norm[..., 0] ** 2


def _solve_rows(V, p, theta, iters=400):
    """Vectorized dual solve; returns ``(q, mu1, t)`` per row of ``V``."""
    K, n = V.shape
    support = p > 0
    vmin = np.min(np.where(support, V, np.inf), axis=1)
    vmax = np.max(np.where(support, V, -np.inf), axis=1)
    spread = vmax - vmin
    flat = spread <= 1e-14 * (1.0 + np.abs(vmax))
    D = V - vmin[:, None]

    def divergence(s):
        q, _ = _weights(D + s[:, None], p)
        return chi2_divergence(p, q)

    hi = spread + 1.0
    for _ in range(2000):
        bad = divergence(hi) > theta
        if not np.any(bad & ~flat):
            break
        hi = np.where(bad, hi * 4.0, hi)
    lo = np.maximum(spread, 1e-300) * 1e-300
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        mid = np.where(mid > lo, mid, hi)
        feasible = divergence(mid) <= theta
        hi = np.where(feasible, mid, hi)
        lo = np.where(feasible, lo, mid)
        if np.all(hi <= lo * (1.0 + 4e-16)):
            break
    q, mu1 = _weights(D + hi[:, None], p)
    q = np.where(flat[:, None], p, q)
    t = hi - vmin
    return q, np.where(flat, 0.0, mu1), t, flat


def worst_case_weights(values, ambiguity: AmbiguitySet) -> DualSolution:
    """Worst-case weights, multipliers and value for one value vector."""
    v = np.asarray(values, dtype=float)
    p = ambiguity.nominal
    if v.shape != p.shape:
        raise DomainError(f"{len(v)} values for {len(p)} nominal weights")
    if len(v) < 2:
        raise DomainError("need at least two scenarios")
    theta = float(ambiguity.theta)
    nominal = float(v @ p)
    if theta == 0.0:
        return DualSolution(0.0, 0.0, np.zeros_like(v), p.copy(), nominal, 0.0, nominal)
    q, mu1, t, flat = _solve_rows(v[None, :], p, theta)
    q, mu1, t = q[0], float(mu1[0]), float(t[0])
    if flat[0]:
        return DualSolution(0.0, 0.0, np.zeros_like(v), p.copy(), nominal, 0.0, nominal)
    mu2 = t - mu1
    h = v + t
    y = np.sqrt(mu1 * np.maximum(h, 0.0))
    value = float(q @ v)
    dual = float(-mu1 * theta - mu2 + np.sum(2.0 * p * y - 2.0 * mu1 * p))
    div = float(chi2_divergence(p, q))
    sol = DualSolution(mu1, mu2, y, q, value, div, dual)
    scale = 1.0 + float(np.max(np.abs(v)))
    problems = []
    if np.min(h[p > 0]) <= 0:
        problems.append("dual domain v + mu1 + mu2 > 0 violated")
    if abs(q.sum() - 1.0) > INVARIANT_TOL:
        problems.append(f"weights sum to {q.sum():.12g}")
    if div > theta + INVARIANT_TOL:
        problems.append(f"divergence {div:.12g} exceeds theta {theta:.12g}")
    if sol.gap > INVARIANT_TOL * scale:
        problems.append(f"duality gap {sol.gap:.3g}")
    if problems:
        raise DualSolveError("; ".join(problems) + f" (values={v.tolist()}, theta={theta})")
    return sol


def worst_case_expectation(values, ambiguity: AmbiguitySet) -> float:
    return worst_case_weights(values, ambiguity).value


def robust_expectation(theta: float):
    """Aggregator for the stage solver: worst-case expectation per state.

    Values are oriented so that larger is better; the adversary minimizes.
    At ``theta = 0`` this is the nominal expectation itself.
    """
    if not theta >= 0:
        raise DomainError(f"theta must be nonnegative, got {theta}")
    if theta == 0:
        return nominal_expectation

    def aggregate(values, probs):
        if values.shape[1] < 2:
            return nominal_expectation(values, probs)
        q, _, _, _ = _solve_rows(values, probs, theta)
        return np.sum(q * values, axis=1), q

    return aggregate


def robust_backward_solve(model: StageModel, tree, trajectories: TrajectorySet, theta: float,
                          form: str = "quadratic", orientation: Optional[str] = None,
                          threads: int = 1) -> PolicySolution:
    """Backward recursion with worst-case continuation values.

    Every gradient step of the stage solver re-solves the inner problem
    exactly at the current decisions.
    """
    policy = backward_solve(model, tree, trajectories, form, orientation, threads,
                            aggregate=robust_expectation(theta))
    policy.meta["theta"] = float(theta)
    return policy


def theta_sweep(model: StageModel, tree, trajectories: TrajectorySet, thetas: Sequence[float],
                form: str = "quadratic", threads: int = 1) -> list:
    """One robust solve per risk budget; rows of ``theta``, value and root decisions."""
    if not len(thetas):
        raise DomainError("theta list must be nonempty")
    rows = []
    for th in thetas:
        pol = robust_backward_solve(model, tree, trajectories, float(th), form, threads=threads)
        row = {"theta": float(th), "value": pol.value}
        for name, d in zip(model.decisions, pol.root_decisions):
            row[f"{name}0"] = float(d)
        rows.append(row)
    return rows


def sweep_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(float(r[c])) for c in cols])
    return buf.getvalue()
