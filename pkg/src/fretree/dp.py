"""Backward dynamic programming on a scenario tree.

Decisions are taken at a virtual root (epoch 0, the known initial state) and
at every non-leaf tree node (epoch = node stage). For each such node the
stage subproblem is solved at the ``K`` sampled trajectory states of its
epoch; the optimal values are then summarized by a shape-constrained fit that
serves as the continuation value of the parent. Leaves carry no decision: the
continuation of a last-epoch node is the exact terminal function evaluated at
the child states.

The stage subproblem is solved on the budget simplex: with prices ``pi_k``
and budget ``B(s)`` every decision is written ``d_k = B w_k / pi_k`` and
projected gradient ascent with Armijo backtracking runs on ``w``.
Decisions with zero price are held at zero; a strictly improving zero-price
direction is reported as unbounded.

States are scalar in the solver. Value-function fits accept vector states.
"""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DomainError,
    FitWarning,
    InfeasibleError,
    InputError,
    UnboundedError,
)

FORMS = ("linear", "quadratic")
ORIENTATIONS = ("convex-increasing", "concave-increasing")


# --------------------------------------------------------------------------
# Value functions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueFunction:
    """``V(s) = s'As + 2b's + c`` (quadratic) or ``V(s) = b's + c`` (linear)."""

    form: str
    A: Optional[np.ndarray]
    b: np.ndarray
    c: float
    orientation: str = "convex-increasing"
    residual: float = 0.0

    @property
    def state_dim(self) -> int:
        return len(self.b)

    def _states(self, s):
        s = np.asarray(s, dtype=float)
        if self.state_dim == 1:
            return s.reshape(-1, 1), s.shape
        return s.reshape(-1, self.state_dim), s.shape[:-1]

    def __call__(self, s):
        S, shape = self._states(s)
        out = S @ self.b + self.c
        if self.form == "quadratic":
            out = out + np.einsum("ki,ij,kj->k", S, self.A, S) + S @ self.b
        out = out.reshape(shape)
        return float(out) if out.ndim == 0 else out

    def gradient(self, s):
        """Gradient in the state; same shape as ``s``."""
        S, _ = self._states(s)
        g = np.broadcast_to(self.b, S.shape).copy()
        if self.form == "quadratic":
            g = 2.0 * (S @ self.A.T) + 2.0 * g
        s = np.asarray(s, dtype=float)
        return g.reshape(s.shape) if self.state_dim == 1 else g

    def scaled(self, r: float) -> "ValueFunction":
        return ValueFunction(self.form, None if self.A is None else self.A * r, self.b * r,
                             self.c * r, self.orientation, self.residual * r * r)

    def check(self, states, tol: float = 1e-9) -> list:
        """Orientation violations at the given states (empty when the fit is valid)."""
        out = []
        if self.form != "quadratic":
            return out
        sign = 1.0 if self.orientation == "convex-increasing" else -1.0
        eig = float(np.min(np.linalg.eigvalsh(sign * self.A)))
        if eig < -tol:
            out.append(f"curvature: min eigenvalue {eig:.3g} of the signed matrix")
        S, _ = self._states(states)
        slope = S @ self.A + self.b
        if np.min(slope) < -tol:
            out.append(f"monotonicity: A s + b reaches {np.min(slope):.3g}")
        return out

    def to_dict(self) -> dict:
        return {"form": self.form, "A": None if self.A is None else self.A.tolist(),
                "b": self.b.tolist(), "c": self.c, "orientation": self.orientation,
                "residual": self.residual}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueFunction":
        A = d.get("A")
        return cls(d["form"], None if A is None else np.asarray(A, dtype=float),
                   np.asarray(d["b"], dtype=float), float(d["c"]), d["orientation"],
                   float(d.get("residual", 0.0)))


def fit_value_function(states, values, form: str = "quadratic",
                       orientation: str = "convex-increasing") -> ValueFunction:
    """Least-squares fit of a value function to ``(state, value)`` points.

    The quadratic form is constrained to the orientation: signed curvature
    positive semidefinite and ``A s + b >= 0`` at every sample. The linear
    form is unconstrained.
    """
    if form not in FORMS:
        raise DomainError(f"unknown form {form!r}")
    if orientation not in ORIENTATIONS:
        raise DomainError(f"unknown orientation {orientation!r}")
    V = np.asarray(values, dtype=float).ravel()
    S = np.asarray(states, dtype=float)
    S = S.reshape(len(V), -1)
    r = S.shape[1]
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(V))):
        raise InputError("states and values must be finite")
    need = 2 if form == "linear" else r + 2
    if len(V) < need:
        raise DomainError(f"{form} fit needs at least {need} points, got {len(V)}")

    if form == "linear":
        X = np.hstack([S, np.ones((len(V), 1))])
        theta = _lstsq(X, V)
        res = float(np.sum((X @ theta - V) ** 2))
        return ValueFunction("linear", None, theta[:r], float(theta[r]), orientation, res)
    if r == 1:
        return _fit_quadratic_1d(S[:, 0], V, orientation)
    return _fit_quadratic_admm(S, V, orientation)


def _lstsq(X, y):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        warnings.warn("rank-deficient value-function fit; using the pseudo-inverse",
                      FitWarning, stacklevel=3)
    return np.linalg.lstsq(X, y, rcond=None)[0]


def _fit_quadratic_1d(s, V, orientation):
    # work in standardized coordinates t = (s - mu) / sd; constraint forms are preserved
    mu = float(np.mean(s))
    sd = float(np.std(s)) or 1.0
    t = (s - mu) / sd
    X = np.column_stack([t * t, 2.0 * t, np.ones_like(t)])
    sign = 1.0 if orientation == "convex-increasing" else -1.0
    t_star = t.min() if sign > 0 else t.max()
    G = np.array([[sign, 0.0, 0.0], [t_star, 1.0, 0.0]])
    if np.linalg.matrix_rank(X) < 3:
        warnings.warn("rank-deficient value-function fit; using the pseudo-inverse",
                      FitWarning, stacklevel=3)

    best = None
    for active in ((), (0,), (1,), (0, 1)):
        if active:
            Ga = G[list(active)]
            _, sv, vt = np.linalg.svd(Ga)
            N = vt[np.sum(sv > 1e-14):].T
        else:
            N = np.eye(3)
        phi = np.linalg.lstsq(X @ N, V, rcond=None)[0]
        theta = N @ phi
        scale = 1.0 + np.max(np.abs(theta))
        if np.min(G @ theta) < -1e-12 * scale:
            continue
        obj = float(np.sum((X @ theta - V) ** 2))
        if best is None or obj < best[0] * (1 - 1e-12) - 1e-300:
            best = (obj, theta)
    obj, (a, bt, ct) = best
    # back to the original coordinates: t = (s - mu)/sd
    A = a / sd ** 2
    b = bt / sd - a * mu / sd ** 2
    c = a * mu ** 2 / sd ** 2 - 2.0 * bt * mu / sd + ct
    return ValueFunction("quadratic", np.array([[A]]), np.array([b]), float(c), orientation, obj)


def _fit_quadratic_admm(S, V, orientation, rho=1.0, tol=1e-10, max_iter=50_000):
    """Alternating-direction solve of the constrained fit for vector states.

    Splits the curvature (projected by eigenvalue clipping) and the sampled
    slope constraints (projected by clipping at zero) from the least-squares
    term.
    """
    K, r = S.shape
    iu = np.triu_indices(r)
    na = len(iu[0])
    sign = 1.0 if orientation == "convex-increasing" else -1.0

    def unpack_A(theta):
        A = np.zeros((r, r))
        A[iu] = theta[:na]
        return A + np.triu(A, 1).T

    # design: s'As + 2b's + c with A parametrized by its upper triangle
    quad = np.stack([S[:, i] * S[:, j] * (1.0 if i == j else 2.0) for i, j in zip(*iu)], axis=1)
    X = np.hstack([quad, 2.0 * S, np.ones((K, 1))])
    p = X.shape[1]
    # E maps theta to the full signed matrix (row-major), M to the K*r slopes A s_k + b
    E = np.zeros((r * r, p))
    for col, (i, j) in enumerate(zip(*iu)):
        E[i * r + j, col] = sign
        E[j * r + i, col] = sign
    M = np.zeros((K * r, p))
    for k in range(K):
        for i in range(r):
            row = k * r + i
            for col, (a, b) in enumerate(zip(*iu)):
                if a == i:
                    M[row, col] += S[k, b]
                elif b == i:
                    M[row, col] += S[k, a]
            M[row, na + i] = 1.0
    H = X.T @ X + rho * (E.T @ E + M.T @ M)
    H_inv = np.linalg.pinv(H)
    XtV = X.T @ V
    theta = np.linalg.lstsq(X, V, rcond=None)[0]
    Z1, Z2 = E @ theta, M @ theta
    U1, U2 = np.zeros_like(Z1), np.zeros_like(Z2)
    for _ in range(max_iter):
        theta = H_inv @ (XtV + rho * (E.T @ (Z1 - U1) + M.T @ (Z2 - U2)))
        Et, Mt = E @ theta, M @ theta
        W = (Et + U1).reshape(r, r)
        w, Q = np.linalg.eigh(0.5 * (W + W.T))
        Z1_new = (Q * np.maximum(w, 0.0)) @ Q.T
        Z1_new = Z1_new.ravel()
        Z2_new = np.maximum(Mt + U2, 0.0)
        prim = max(np.max(np.abs(Et - Z1_new)), np.max(np.abs(Mt - Z2_new)))
        dual = rho * max(np.max(np.abs(Z1_new - Z1)), np.max(np.abs(Z2_new - Z2)))
        Z1, Z2 = Z1_new, Z2_new
        U1 += Et - Z1
        U2 += Mt - Z2
        if prim < tol and dual < tol:
            break
    A = sign * Z1.reshape(r, r)
    A = 0.5 * (A + A.T)
    b = theta[na:na + r].copy()
    # restore exact slope feasibility after the splitting iterations
    slopes = S @ A + b
    b = b + np.maximum(0.0, -slopes.min(axis=0))
    c = float(theta[-1])
    vf = ValueFunction("quadratic", A, b, c, orientation, 0.0)
    res = float(np.sum((vf(S) - V) ** 2))
    return ValueFunction("quadratic", A, b, c, orientation, res)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySet:
    """Sampled states; row ``t - 1`` holds the ``K`` states of row ``t``."""

    states: np.ndarray
    s0: float
    seed: Optional[int] = None

    @property
    def K(self) -> int:
        return self.states.shape[1]

    @property
    def T(self) -> int:
        return self.states.shape[0]

    def row(self, t: int) -> np.ndarray:
        return self.states[t - 1]


def sample_trajectories(S0: float, alpha: float, delta: float, T: int, K: int,
                        seed: Optional[int] = None) -> TrajectorySet:
    """Uniform states on ``(1e-6 S0, (1 - delta + alpha)^(t-1) S0]`` for ``t = 1..T``.

    Row ``t`` bounds the capital reachable after ``t - 1`` decision epochs.
    """
    if not S0 > 0:
        raise DomainError("S0 must be positive")
    if not (0 <= alpha <= 1 and 0 <= delta <= 1):
        raise DomainError("alpha and delta must lie in [0, 1]")
    if K < 2 or T < 1:
        raise DomainError("need K >= 2 and T >= 1")
    rng = np.random.default_rng(seed)
    floor = 1e-6 * S0
    rows = []
    for t in range(1, T + 1):
        upper = max((1.0 - delta + alpha) ** (t - 1) * S0, 2.0 * floor)
        rows.append(np.sort(upper - rng.random(K) * (upper - floor)))
    return TrajectorySet(np.array(rows), float(S0), seed)


# --------------------------------------------------------------------------
# Models and the stage subproblem
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetSet:
    """Feasible set ``{d >= 0 : prices . d <= budget(s, t)}``.

    ``prices(xi_children, probs, t)`` may depend on the children of the node.
    With ``binding`` the budget is spent in full.
    """

    prices: Callable
    budget: Callable
    binding: bool = True


@dataclass(frozen=True)
class StageModel:
    """Vectorized stage callbacks for states ``s`` of shape ``(K,)`` and
    decisions ``d`` of shape ``(K, m)``.

    reward(s, d, xi, t) and its gradient in ``d``; transition(s, d, xi_next)
    and its gradient in ``d``; terminal(s) and its derivative. ``scenario``
    turns a tree node value into the ``xi`` the callbacks see.
    """

    decisions: tuple
    reward: Callable
    reward_grad: Callable
    transition: Callable
    transition_grad: Callable
    terminal: Callable
    terminal_grad: Callable
    feasible: BudgetSet
    sense: str = "maximize"
    homogeneous_degree: Optional[float] = None
    scenario: Callable = float

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise DomainError(f"sense must be maximize or minimize, got {self.sense!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.sense == "maximize" else -1.0

    @property
    def orientation(self) -> str:
        return "concave-increasing" if self.sense == "maximize" else "convex-increasing"


class Terminal:
    """Continuation value of a leaf child: the model's terminal function."""

    def __init__(self, model: StageModel):
        self.model = model

    def __call__(self, s):
        return self.model.terminal(s)

    def gradient(self, s):
        return self.model.terminal_grad(s)


def nominal_expectation(values, probs):
    """Expectation over children; returns the value and the weights used."""
    w = np.broadcast_to(probs, values.shape)
    return values @ probs, w


def _project_simplex(V):
    """Euclidean projection of each row onto the probability simplex."""
    n = V.shape[1]
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    idx = np.arange(1, n + 1)
    cond = U - css / idx > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(len(V)), rho] / (rho + 1)
    return np.maximum(V - tau[:, None], 0.0)


def _project_capped(V):
    """Projection onto ``{w >= 0, sum(w) <= 1}``."""
    P = np.maximum(V, 0.0)
    over = P.sum(axis=1) > 1.0
    if np.any(over):
        P[over] = _project_simplex(V[over])
    return P


@dataclass
class _Subproblem:
    model: StageModel
    s: np.ndarray
    xi: float
    xis: np.ndarray
    probs: np.ndarray
    conts: list
    t: int
    aggregate: Callable

    def evaluate(self, rows, d):
        """Sign-adjusted objective and its gradient in ``d`` at the given rows."""
        m = self.model
        s = self.s[rows]
        sign = m.sign
        f = sign * np.asarray(m.reward(s, d, self.xi, self.t), dtype=float)
        g = sign * np.asarray(m.reward_grad(s, d, self.xi, self.t), dtype=float)
        vals, slopes, jacs = [], [], []
        for xj, cont in zip(self.xis, self.conts):
            nxt = np.asarray(m.transition(s, d, xj), dtype=float)
            vals.append(sign * np.asarray(cont(nxt), dtype=float))
            slopes.append(sign * np.asarray(cont.gradient(nxt), dtype=float))
            jacs.append(np.asarray(m.transition_grad(s, d, xj), dtype=float))
        vals = np.stack(vals, axis=1)
        agg, w = self.aggregate(vals, self.probs)
        f = f + agg
        for j in range(len(self.conts)):
            g = g + (w[:, j] * slopes[j])[:, None] * jacs[j]
        return f, g


def _solve_batch(model: StageModel, s, xi, children, t, aggregate=nominal_expectation,
                 tol: float = 1e-9, max_iter: int = 20_000):
    """Solve the stage subproblem at every state in ``s``.

    Returns ``(decisions (K, m), values (K,))`` with values in the model's
    own sense.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    K, m = len(s), len(model.decisions)
    if not children:
        raise InputError("a decision node needs at least one child")
    xis = np.array([float(c[0]) for c in children])
    probs = np.array([float(c[1]) for c in children])
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise InputError(f"children probabilities must sum to 1, got {probs.sum():.12g}")
    prob = _Subproblem(model, s, float(xi), xis, probs, [c[2] for c in children], t, aggregate)

    prices = np.asarray(model.feasible.prices(xis, probs, t), dtype=float).reshape(m)
    budget = np.broadcast_to(np.asarray(model.feasible.budget(s, t), dtype=float), (K,)).copy()
    if not np.all(np.isfinite(prices)) or np.any(prices < 0):
        raise InfeasibleError(f"prices must be finite and nonnegative, got {prices}")
    if not np.all(np.isfinite(budget)) or np.any(budget < 0):
        raise InfeasibleError(f"negative budget at stage {t}")
    priced = np.flatnonzero(prices > 0)
    P = len(priced)
    project = _project_simplex if model.feasible.binding else _project_capped

    def decisions(rows, W):
        d = np.zeros((len(rows), m))
        if P:
            d[:, priced] = budget[rows, None] * W / prices[priced]
        return d

    all_rows = np.arange(K)
    W = np.full((K, P), 1.0 / (P if model.feasible.binding else P + 1))
    f, g = prob.evaluate(all_rows, decisions(all_rows, W))
    active = (budget > 0) & (P > 0)
    eta = np.ones(K)
    # iterations without an objective gain above rounding; the first-order
    # residual can sit just above tol when f differences vanish in floating point
    stall = np.zeros(K, dtype=int)

    def w_grad(rows, g_rows):
        return g_rows[:, priced] * budget[rows, None] / prices[priced]

    if P:
        gw = w_grad(all_rows, g)
        eta = 1.0 / np.maximum(np.max(np.abs(gw), axis=1), 1e-300)
    for _ in range(max_iter):
        if not np.any(active):
            break
        rows = np.flatnonzero(active)
        gw = w_grad(rows, g[rows])
        stat = np.max(np.abs(W[rows] - project(W[rows] + gw)), axis=1)
        done = stat <= tol
        active[rows[done]] = False
        rows, gw = rows[~done], gw[~done]
        if len(rows) == 0:
            break
        pending = np.ones(len(rows), dtype=bool)
        for _bt in range(80):
            idx = np.flatnonzero(pending)
            r = rows[idx]
            Wn = project(W[r] + eta[r, None] * gw[idx])
            fn, gn = prob.evaluate(r, decisions(r, Wn))
            gain = np.sum(gw[idx] * (Wn - W[r]), axis=1)
            ok = np.isfinite(fn) & (fn >= f[r] + 1e-4 * gain)
            acc = r[ok]
            flat = fn[ok] - f[acc] <= 1e-15 * (1.0 + np.abs(f[acc]))
            stall[acc] = np.where(flat, stall[acc] + 1, 0)
            W[acc], f[acc], g[acc] = Wn[ok], fn[ok], gn[ok]
            eta[acc] *= 2.0
            eta[r[~ok]] *= 0.5
            pending[idx[ok]] = False
            if not np.any(pending):
                break
        # rows whose line search found no ascent are stationary to rounding
        active[rows[pending]] = False
        active[stall >= 30] = False

    d = decisions(all_rows, W)
    free = np.setdiff1d(np.arange(m), priced)
    if len(free):
        scale = 1.0 + np.abs(f)
        if np.any(g[:, free] > 1e-12 * scale[:, None]):
            k = int(np.argmax(np.max(g[:, free], axis=1)))
            name = model.decisions[free[int(np.argmax(g[k, free]))]]
            raise UnboundedError(f"stage {t}: decision {name!r} has zero price and improves "
                                 f"the objective at state {s[k]:.6g}")
    return d, model.sign * f


def stage_subproblem(model: StageModel, s: float, xi: float, children: Sequence,
                     t: int = 0, aggregate=nominal_expectation):
    """Optimal decisions and value at a single state.

    ``children`` holds ``(xi_j, p_j, V_j)`` where ``V_j`` is a callable
    continuation with a ``gradient`` method (a ``ValueFunction`` or
    ``Terminal``).
    """
    d, v = _solve_batch(model, np.array([float(s)]), xi, children, t, aggregate)
    return d[0], float(v[0])


# --------------------------------------------------------------------------
# Backward recursion
# --------------------------------------------------------------------------


@dataclass
class NodePolicy:
    epoch: int
    node: Optional[int]
    states: np.ndarray
    decisions: np.ndarray
    values: np.ndarray
    value_function: Optional[ValueFunction] = None

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "node": self.node, "states": self.states.tolist(),
                "decisions": self.decisions.tolist(), "values": self.values.tolist(),
                "value_function": None if self.value_function is None
                else self.value_function.to_dict()}


@dataclass
class PolicySolution:
    decision_names: tuple
    root: NodePolicy
    nodes: dict
    subproblems: int
    meta: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.root.values[0])

    @property
    def root_decisions(self) -> np.ndarray:
        return self.root.decisions[0]

    def value_function(self, node_id: int) -> ValueFunction:
        return self.nodes[node_id].value_function

    def to_dict(self) -> dict:
        epochs = sorted({p.epoch for p in self.nodes.values()})
        return {
            "decisions": list(self.decision_names),
            "value": self.value,
            "root": self.root.to_dict(),
            "stages": [{"stage": e, "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)
                                              if self.nodes[k].epoch == e]} for e in epochs],
            "subproblems": self.subproblems,
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "node", "k", *self.decision_names, "value"])
        entries = [self.root] + [self.nodes[k] for k in sorted(self.nodes)]
        for p in entries:
            for k in range(len(p.values)):
                w.writerow([p.epoch, "root" if p.node is None else p.node, k,
                            *(repr(float(x)) for x in p.decisions[k]), repr(float(p.values[k]))])
        return buf.getvalue()


def _pool_map(fn, items, threads):
    if threads is None or threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    workers = (os.cpu_count() or 1) if threads == 0 else threads
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _check_shapes(tree, trajectories):
    if trajectories.T != tree.stages:
        raise ContractError(f"tree has {tree.stages} stages, trajectories have {trajectories.T} rows")


def backward_solve(model: StageModel, tree, trajectories: TrajectorySet, form: str = "quadratic",
                   orientation: Optional[str] = None, threads: int = 1,
                   aggregate=nominal_expectation) -> PolicySolution:
    """Backward recursion over the tree (see module docstring)."""
    _check_shapes(tree, trajectories)
    orientation = orientation or model.orientation
    terminal = Terminal(model)
    nodes: dict = {}
    count = 0

    def continuation(child):
        return terminal if not child.children else nodes[child.id].value_function

    for epoch in range(tree.stages - 1, 0, -1):
        states = trajectories.row(epoch + 1)

        def work(node, states=states, epoch=epoch):
            kids = [(model.scenario(c.value), c.prob, continuation(c)) for c in tree.children(node.id)]
            d, v = _solve_batch(model, states, model.scenario(node.value), kids, epoch, aggregate)
            vf = fit_value_function(states, v, form, orientation)
            return NodePolicy(epoch, node.id, states.copy(), d, v, vf)

        stage = tree.stage_nodes(epoch)
        for node, res in zip(stage, _pool_map(work, stage, threads)):
            nodes[node.id] = res
        count += len(stage) * len(states)

    root = _solve_root(model, tree, trajectories.s0, nodes, terminal, aggregate)
    return PolicySolution(tuple(model.decisions), root, nodes, count + 1)


def _solve_root(model, tree, s0, nodes, terminal, aggregate):
    kids = [(model.scenario(c.value), c.prob,
             terminal if not c.children else nodes[c.id].value_function) for c in tree.roots]
    d, v = _solve_batch(model, np.array([s0]), 0.0, kids, 0, aggregate)
    return NodePolicy(0, None, np.array([s0]), d, v)


def backward_solve_homogeneous(model: StageModel, tree, trajectories: TrajectorySet,
                               form: str = "quadratic", orientation: Optional[str] = None,
                               threads: int = 1) -> PolicySolution:
    """Shortcut for models homogeneous of degree 1 in the scenario.

    At every epoch one reference subproblem per sibling index is solved with
    the stage-1 quantizer as children; a node's value function is the
    reference fit scaled by the ratio of the node's median to the base
    median. Exact when the median ratios are constant along each path.
    """
    if model.homogeneous_degree != 1:
        raise ContractError("the homogeneous shortcut needs a model of homogeneity degree 1")
    _check_shapes(tree, trajectories)
    orientation = orientation or model.orientation
    terminal = Terminal(model)
    first = tree.roots
    n1 = len(first)
    for n in tree.nodes:
        if n.children and len(n.children) != n1:
            raise ContractError(f"node {n.id} has {len(n.children)} children; the shortcut "
                                f"needs the stage-1 count {n1} everywhere")
    xi1 = [model.scenario(n.value) for n in first]
    p1 = [n.prob for n in first]
    refs: dict = {}
    nodes: dict = {}
    count = 0
    for epoch in range(tree.stages - 1, 0, -1):
        states = trajectories.row(epoch + 1)
        stage = tree.stage_nodes(epoch)
        indices = sorted({tree.sibling_index(n) for n in stage})

        def work(i, states=states, epoch=epoch):
            kids = [(xi1[j], p1[j], terminal if epoch + 1 == tree.stages else refs[(epoch + 1, j)].value_function)
                    for j in range(n1)]
            d, v = _solve_batch(model, states, xi1[i], kids, epoch)
            return NodePolicy(epoch, None, states.copy(), d, v,
                              fit_value_function(states, v, form, orientation))

        for i, res in zip(indices, _pool_map(work, indices, threads)):
            refs[(epoch, i)] = res
        count += len(indices) * len(states)
        for n in stage:
            ref = refs[(epoch, tree.sibling_index(n))]
            r = n.median / tree.base_median
            nodes[n.id] = NodePolicy(epoch, n.id, ref.states, ref.decisions, r * ref.values,
                                     ref.value_function.scaled(r))

    root = _solve_root(model, tree, trajectories.s0, nodes, terminal, nominal_expectation)
    return PolicySolution(tuple(model.decisions), root, nodes, count + 1, {"shortcut": True})


# --------------------------------------------------------------------------
# Forward evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PathState:
    node: int
    stage: int
    state: float
    decisions: Optional[np.ndarray]


def forward_pass(model: StageModel, tree, policy: PolicySolution,
                 aggregate=nominal_expectation) -> list:
    """Realized states along every tree path under the fitted policy.

    The root uses its solved decision; every non-leaf node re-solves its
    subproblem at the realized state with the fitted continuation values.
    Returns one ``PathState`` per tree node in id order.
    """
    terminal = Terminal(model)
    d0 = policy.root_decisions[None, :]
    s0 = policy.root.states[:1]
    out = {}
    frontier = [(c, s0, d0) for c in tree.roots]
    while frontier:
        nxt = []
        for node, s_par, d_par in frontier:
            s = np.asarray(model.transition(s_par, d_par, model.scenario(node.value)), dtype=float)
            d = None
            if node.children:
                kids = [(model.scenario(c.value), c.prob,
                         terminal if not c.children else policy.nodes[c.id].value_function)
                        for c in tree.children(node.id)]
                dd, _ = _solve_batch(model, s, model.scenario(node.value), kids, node.stage, aggregate)
                d = dd[0]
                nxt.extend((c, s, dd) for c in tree.children(node.id))
            out[node.id] = PathState(node.id, node.stage, float(s[0]), d)
        frontier = nxt
    return [out[i] for i in sorted(out)]
