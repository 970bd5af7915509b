"""Government budget allocation under flood risk.

Each epoch the budget ``alpha * S`` is split into investment ``x``,
consumption ``c`` and insurance cover ``z`` priced at ``(1 + V) E[xi]``.
Capital evolves as ``S' = [(1 - delta) S + x](1 - xi') + z xi'`` where
``xi'`` is the relative loss of the next period. The objective is the
discounted CRRA utility of consumption plus a terminal utility of capital.

Tree node values are absolute losses; they are divided by ``exposure`` and
clamped to ``[0, 1 - 1e-9]`` to obtain relative losses.

Default constants are implementer choices, not calibrated values.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .distributions import FrechetParams, quantile
from .dp import (
    BudgetSet,
    PolicySolution,
    StageModel,
    TrajectorySet,
    backward_solve,
    forward_pass,
    nominal_expectation,
    sample_trajectories,
)
from .errors import ConfigError, DomainError

XI_CAP = 1.0 - 1e-9
MAX_CLAMPED = 0.05
DECISIONS = ("x", "c", "z")


@dataclass(frozen=True)
class FloodModelConfig:
    alpha: float = 0.2
    beta: float = 0.5
    delta: float = 0.05
    rho: float = 1.0
    gamma: float = 0.5
    V: float = 0.05
    S0: float = 322.56
    T: int = 3
    pnl: float = 0.6779
    exposure: Optional[float] = None
    K: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "rho", "gamma"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.rho > 0:
            raise ConfigError("rho must be positive")
        if not self.S0 > 0:
            raise ConfigError("S0 must be positive")
        if not self.V >= 0:
            raise ConfigError("the insurance load must be nonnegative")
        if self.exposure is not None and not self.exposure > 0:
            raise ConfigError("exposure must be positive")
        if self.T < 1 or self.K < 2:
            raise ConfigError("need T >= 1 and K >= 2")


def default_exposure(params: FrechetParams, level: float = 0.9999) -> float:
    """Loss quantile used to map absolute losses onto relative ones."""
    return float(quantile(params, level))


# --------------------------------------------------------------------------
# Model pieces
# --------------------------------------------------------------------------


def utility(c, gamma: float):
    """CRRA utility ``c^(1-gamma)/(1-gamma)``; logarithm at ``gamma = 1``."""
    c = np.asarray(c, dtype=float)
    if np.any(c < 0):
        raise DomainError("consumption must be nonnegative")
    if gamma == 1.0:
        if np.any(c == 0):
            warnings.warn("log utility at zero consumption is -inf", RuntimeWarning, stacklevel=2)
        with np.errstate(divide="ignore"):
            out = np.log(c)
    else:
        out = c ** (1.0 - gamma) / (1.0 - gamma)
    return float(out) if out.ndim == 0 else out


def marginal_utility(c, gamma: float):
    c = np.maximum(np.asarray(c, dtype=float), 1e-300)
    return c ** (-gamma)


def premium(mean_loss: float, V: float) -> float:
    """Price of one unit of cover: ``(1 + V) E[xi]``."""
    if mean_loss < 0:
        raise DomainError("mean loss must be nonnegative")
    return (1.0 + V) * mean_loss


def transition(S, x, z, xi, delta: float):
    return ((1.0 - delta) * S + x) * (1.0 - xi) + z * xi


def relative_losses(values, exposure: float):
    """Absolute losses over exposure, clamped; returns ``(xi, clamped_mask)``."""
    raw = np.asarray(values, dtype=float) / exposure
    xi = np.clip(raw, 0.0, XI_CAP)
    return xi, raw != xi


def build_model(config: FloodModelConfig, tree=None, exposure: Optional[float] = None) -> StageModel:
    """Stage model of the allocation problem for the given tree.

    ``exposure`` overrides the config; without either, node values are
    taken to be relative losses already.
    """
    exposure = exposure or config.exposure or 1.0
    if tree is not None:
        _, clamped = relative_losses([n.value for n in tree.nodes], exposure)
        frac = float(np.mean(clamped)) if len(clamped) else 0.0
        if frac > MAX_CLAMPED:
            raise ConfigError(f"{np.sum(clamped)} of {len(clamped)} node losses clamped "
                              f"({frac:.1%}); exposure {exposure:.6g} is too small")
    a, b, d, rho, g, T = config.alpha, config.beta, config.delta, config.rho, config.gamma, config.T

    def reward(s, dec, xi, t):
        return (1.0 - b) * rho ** (-t) * utility(dec[:, 1], g)

    def reward_grad(s, dec, xi, t):
        out = np.zeros_like(dec)
        out[:, 1] = (1.0 - b) * rho ** (-t) * marginal_utility(dec[:, 1], g)
        return out

    def trans(s, dec, xi):
        return transition(s, dec[:, 0], dec[:, 2], xi, d)

    def trans_grad(s, dec, xi):
        out = np.zeros_like(dec)
        out[:, 0] = 1.0 - xi
        out[:, 2] = xi
        return out

    def terminal(s):
        return b * rho ** (-T) * utility(np.maximum(s, 0.0), g)

    def terminal_grad(s):
        return b * rho ** (-T) * marginal_utility(s, g)

    def prices(xis, probs, t):
        return np.array([1.0, 1.0, premium(float(np.dot(xis, probs)), config.V)])

    def budget(s, t):
        return a * s

    def scenario(value):
        return float(min(max(value / exposure, 0.0), XI_CAP))

    return StageModel(DECISIONS, reward, reward_grad, trans, trans_grad, terminal, terminal_grad,
                      BudgetSet(prices, budget, binding=True), "maximize", None, scenario)


def trajectories_for(config: FloodModelConfig, seed: Optional[int] = None) -> TrajectorySet:
    return sample_trajectories(config.S0, config.alpha, config.delta, config.T, config.K,
                               config.seed if seed is None else seed)


def solve(config: FloodModelConfig, tree, exposure: Optional[float] = None,
          theta: Optional[float] = None, threads: int = 1) -> PolicySolution:
    """Nominal (or, with ``theta``, robust) solve of the allocation problem."""
    if tree.stages != config.T:
        config = replace(config, T=tree.stages)
    model = build_model(config, tree, exposure)
    traj = trajectories_for(config)
    if theta is None:
        return backward_solve(model, tree, traj, threads=threads)
    from .robust import robust_backward_solve
    return robust_backward_solve(model, tree, traj, theta, threads=threads)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CapitalDistribution:
    capital: np.ndarray
    probability: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probability)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["capital", "probability", "cumulative"])
        for row in zip(self.capital, self.probability, self.cumulative):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def capital_distribution(policy: PolicySolution, tree, config: FloodModelConfig,
                         exposure: Optional[float] = None, aggregate=nominal_expectation
                         ) -> CapitalDistribution:
    """Distribution of terminal capital over the tree paths under the policy."""
    if tree.stages != config.T:
        config = replace(config, T=tree.stages)
    model = build_model(config, tree, exposure)
    states = forward_pass(model, tree, policy, aggregate)
    path_p = {}
    for n in tree.nodes:
        path_p[n.id] = n.prob * (1.0 if n.parent is None else path_p[n.parent])
    leaves = [ps for ps in states if not tree.nodes[ps.node].children]
    cap = np.array([ps.state for ps in leaves])
    prob = np.array([path_p[ps.node] for ps in leaves])
    order = np.argsort(cap, kind="stable")
    return CapitalDistribution(cap[order], prob[order])


def decision_means(model: StageModel, tree, policy: PolicySolution) -> dict:
    """Probability-weighted mean decisions per epoch along the realized paths."""
    states = forward_pass(model, tree, policy)
    path_p = {}
    for n in tree.nodes:
        path_p[n.id] = n.prob * (1.0 if n.parent is None else path_p[n.parent])
    out = {0: policy.root_decisions.copy()}
    for ps in states:
        if ps.decisions is not None:
            out.setdefault(ps.stage, np.zeros(len(DECISIONS)))
            out[ps.stage] = out[ps.stage] + path_p[ps.node] * ps.decisions
    return out


def load_sweep(config: FloodModelConfig, tree, V_values: Sequence[float],
               exposure: Optional[float] = None, threads: int = 1) -> list:
    """Solve for every load; rows hold ``V``, per-epoch mean ``z`` and ``x``, and the value."""
    if not len(V_values):
        raise DomainError("load list must be nonempty")
    if tree.stages != config.T:
        config = replace(config, T=tree.stages)
    rows = []
    for V in V_values:
        cfg = replace(config, V=float(V))
        policy = solve(cfg, tree, exposure, threads=threads)
        means = decision_means(build_model(cfg, tree, exposure), tree, policy)
        row = {"V": float(V), "value": policy.value}
        for e in sorted(means):
            row[f"x{e}"] = float(means[e][0])
            row[f"z{e}"] = float(means[e][2])
        rows.append(row)
    return rows


def rows_to_csv(rows: list, columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], (float, int, np.floating)) else r[c]
                    for c in columns])
    return buf.getvalue()
