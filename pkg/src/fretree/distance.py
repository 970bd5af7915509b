"""Kantorovich distances, exact small transport problems and nested distances.

The path distance between two scenario paths is the sum over stages of the
absolute differences of node values. Nested distances are computed by
backward recursion: for node pairs at stage t,

    delta_t(i, j) = |v_i - v_j| + OT(children(i), children(j); delta_{t+1}),

and the result is the optimal transport value between the two sets of
stage-1 nodes under ``delta_1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import DomainError, InfiniteMeanError, InputError
from .quantize import DistributionView, Quantization
from .tree import ScenarioTree


@dataclass(frozen=True)
class DiscreteMeasure1D:
    atoms: np.ndarray
    weights: np.ndarray

    def __init__(self, atoms, weights, tol: float = 1e-12):
        a = np.asarray(atoms, dtype=float).reshape(-1)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if a.shape != w.shape or a.size == 0:
            raise InputError("atoms and weights must be nonempty and of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
            raise InputError(f"weights must be nonnegative and sum to 1 (sum={w.sum():.15g})")
        order = np.argsort(a, kind="stable")
        object.__setattr__(self, "atoms", a[order])
        object.__setattr__(self, "weights", w[order])

    @property
    def mean(self) -> float:
        return float(self.atoms @ self.weights)


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    cost: float


@dataclass(frozen=True)
class LipschitzBounds:
    L1: float
    Lt: tuple = ()

    def __post_init__(self):
        if self.L1 < 0 or any(v < 0 for v in self.Lt):
            raise DomainError("Lipschitz constants must be nonnegative")


# --------------------------------------------------------------------------
# One-dimensional distances
# --------------------------------------------------------------------------


def kantorovich_1d(a: DiscreteMeasure1D, b: DiscreteMeasure1D) -> float:
    """W1 distance as the area between the two CDFs."""
    x = np.union1d(a.atoms, b.atoms)
    Fa = np.cumsum(a.weights)[np.searchsorted(a.atoms, x, side="right") - 1]
    Fa = np.where(np.searchsorted(a.atoms, x, side="right") > 0, Fa, 0.0)
    Fb = np.cumsum(b.weights)[np.searchsorted(b.atoms, x, side="right") - 1]
    Fb = np.where(np.searchsorted(b.atoms, x, side="right") > 0, Fb, 0.0)
    return float(np.sum(np.abs(Fa - Fb)[:-1] * np.diff(x)))


def semidiscrete_kantorovich(dist: DistributionView, q: Quantization) -> float:
    """``int |F(x) - F_q(x)| dx`` over the loss axis, by adaptive quadrature.

    Between consecutive atoms the discrete CDF is a constant ``c``; each such
    segment is split where the continuous CDF crosses ``c``.
    """
    if not dist.finite_mean:
        raise InfiniteMeanError("semi-discrete distance is infinite for a law without a finite mean")
    z = np.asarray(q.points, dtype=float)
    w = np.asarray(q.probabilities, dtype=float)
    cum = np.cumsum(w)
    cum[-1] = 1.0
    F = lambda x: float(dist.cdf(x))
    opts = dict(epsabs=1e-13, epsrel=1e-12, limit=500)

    def seg(lo, hi, c):
        if hi <= lo:
            return 0.0
        x_c = float(dist.quantile(c)) if 0 < c < 1 else (hi if c >= 1 else lo)
        x_c = min(max(x_c, lo), hi)
        total = 0.0
        for a, b in ((lo, x_c), (x_c, hi)):
            if b > a:
                total += integrate.quad(lambda x: abs(F(x) - c), a, b, **opts)[0]
        return total

    lower = float(dist.quantile(1e-300)) if dist.standard is None else (
        dist.loc + dist.scale * float(dist.standard.quantile(1e-300)))
    lower = min(lower, z[0])
    total = seg(lower, z[0], 0.0)
    for k in range(z.size - 1):
        total += seg(z[k], z[k + 1], cum[k])
    total += integrate.quad(lambda x: 1.0 - F(x), z[-1], math.inf, **opts)[0]
    return total


# --------------------------------------------------------------------------
# Exact transport by successive shortest paths
# --------------------------------------------------------------------------


def transport_lp(cost, source, target, tol: float = 1e-9) -> TransportPlan:
    """Exact optimal transport plan by min-cost flow (successive shortest paths).

    Rows are sources and columns are sinks; each augmentation follows a
    shortest residual path found by Dijkstra on reduced costs
    ``c(u, v) + pi(u) - pi(v)``.
    """
    C = np.asarray(cost, dtype=float)
    a = np.asarray(source, dtype=float).reshape(-1)
    b = np.asarray(target, dtype=float).reshape(-1)
    m, n = a.size, b.size
    if C.shape != (m, n):
        raise InputError(f"cost shape {C.shape} does not match marginals ({m}, {n})")
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix must be finite")
    if np.any(a < 0) or np.any(b < 0):
        raise InputError("marginals must be nonnegative")
    if abs(a.sum() - b.sum()) > tol:
        raise InputError(f"marginal mass mismatch {a.sum() - b.sum():.3g}")
    if m > 256 or n > 256:
        raise InputError("exact transport is limited to 256 x 256")

    flow = np.zeros((m, n))
    supply, demand = a.copy(), b.copy()
    pi_r = np.zeros(m)
    pi_c = C.min(axis=0).copy()
    eps = 1e-15 * max(1.0, a.sum())
    inf = math.inf

    while True:
        src = supply > eps
        snk = demand > eps
        if not src.any() or not snk.any():
            break
        # Dijkstra over rows (0..m-1) and columns (m..m+n-1)
        dist_r = np.where(src, 0.0, inf)
        dist_c = np.full(n, inf)
        prev_c = np.full(n, -1)      # row feeding each column
        prev_r = np.full(m, -1)      # column feeding each row via a reverse edge
        done_r = np.zeros(m, bool)
        done_c = np.zeros(n, bool)
        target_col = -1
        while True:
            cand_r = np.where(done_r, inf, dist_r)
            cand_c = np.where(done_c, inf, dist_c)
            i = int(np.argmin(cand_r))
            j = int(np.argmin(cand_c))
            if cand_r[i] == inf and cand_c[j] == inf:
                break
            if cand_r[i] <= cand_c[j]:
                done_r[i] = True
                red = C[i] + pi_r[i] - pi_c
                nd = dist_r[i] + np.maximum(red, 0.0)
                better = (~done_c) & (nd < dist_c)
                dist_c[better] = nd[better]
                prev_c[better] = i
            else:
                done_c[j] = True
                if snk[j]:
                    target_col = j
                    break
                back = flow[:, j] > eps
                red = -C[:, j] + pi_c[j] - pi_r
                nd = dist_c[j] + np.maximum(red, 0.0)
                better = back & (~done_r) & (nd < dist_r)
                dist_r[better] = nd[better]
                prev_r[better] = j
        if target_col < 0:
            raise InputError("no augmenting path: marginals are inconsistent")
        D = dist_c[target_col]
        pi_r += np.minimum(dist_r, D)
        pi_c += np.minimum(dist_c, D)

        # walk back, collecting the path and its bottleneck
        path = []
        j = target_col
        bottleneck = demand[target_col]
        while True:
            i = int(prev_c[j])
            path.append((i, j, +1))
            jj = int(prev_r[i])
            if jj < 0:
                bottleneck = min(bottleneck, supply[i])
                start = i
                break
            path.append((i, jj, -1))
            bottleneck = min(bottleneck, flow[i, jj])
            j = jj
        for i, j, sgn in path:
            flow[i, j] += sgn * bottleneck
        supply[start] -= bottleneck
        demand[target_col] -= bottleneck

    flow[flow < 0] = 0.0
    return TransportPlan(matrix=flow, cost=float(np.sum(flow * C)))


# --------------------------------------------------------------------------
# Nested distance and bounds
# --------------------------------------------------------------------------


def _children_measure(tree: ScenarioTree, node_id):
    kids = tree.children(node_id)
    return DiscreteMeasure1D([k.value for k in kids], [k.prob for k in kids], tol=1e-9)


def nested_distance(tree_a: ScenarioTree, tree_b: ScenarioTree) -> float:
    """Nested distance under the additive per-stage absolute path distance."""
    if tree_a.stages != tree_b.stages:
        raise InputError(f"trees have different depths ({tree_a.stages} vs {tree_b.stages})")
    T = tree_a.stages
    delta: dict = {}
    for t in range(T, 0, -1):
        for u in tree_a.stage_nodes(t):
            for v in tree_b.stage_nodes(t):
                d = abs(u.value - v.value)
                if u.children and v.children:
                    ka, kb = tree_a.children(u.id), tree_b.children(v.id)
                    cost = np.array([[delta[(x.id, y.id)] for y in kb] for x in ka])
                    d += transport_lp(cost, [x.prob for x in ka], [y.prob for y in kb]).cost
                elif u.children or v.children:
                    raise InputError(f"node {u.id} / {v.id}: leaf depth mismatch")
                delta[(u.id, v.id)] = d
    ra, rb = tree_a.roots, tree_b.roots
    cost = np.array([[delta[(x.id, y.id)] for y in rb] for x in ra])
    return transport_lp(cost, [x.prob for x in ra], [y.prob for y in rb]).cost


def terminal_distribution(tree: ScenarioTree) -> DiscreteMeasure1D:
    """Unconditional law of the final-stage values."""
    from .tree import path_probability
    leaves = tree.leaves
    return DiscreteMeasure1D([l.value for l in leaves],
                             [path_probability(tree, l.id) for l in leaves], tol=1e-9)


def per_stage_distances(tree_a: ScenarioTree, tree_b: ScenarioTree) -> list:
    """``d_t`` = largest W1 distance between conditional child laws over all node pairs at t-1."""
    if tree_a.stages != tree_b.stages:
        raise InputError("trees have different depths")
    out = []
    for t in range(1, tree_a.stages + 1):
        pa = [None] if t == 1 else [n.id for n in tree_a.stage_nodes(t - 1)]
        pb = [None] if t == 1 else [n.id for n in tree_b.stage_nodes(t - 1)]
        out.append(max(kantorovich_1d(_children_measure(tree_a, u), _children_measure(tree_b, v))
                       for u in pa for v in pb))
    return out


def empirical_lipschitz(trees: Sequence[ScenarioTree], L1: float = 1.0) -> LipschitzBounds:
    """Worst-case ratio of conditional W1 distances to parent-value distances, per stage."""
    T = trees[0].stages
    Lt = []
    for s in range(2, T + 1):
        worst = 0.0
        for tree in trees:
            nodes = tree.stage_nodes(s - 1)
            for u, v in itertools.combinations(nodes, 2):
                gap = abs(u.value - v.value)
                if gap > 0:
                    worst = max(worst, kantorovich_1d(_children_measure(tree, u.id),
                                                      _children_measure(tree, v.id)) / gap)
        Lt.append(worst)
    return LipschitzBounds(L1=L1, Lt=tuple(Lt))


def _tail_products(Lt, T):
    Lt = list(Lt)
    if len(Lt) != max(T - 1, 0):
        raise DomainError(f"need {T - 1} stage constants, got {len(Lt)}")
    # prods[t-1] = prod_{s=t+1}^T (L_s + 1), with L_s = Lt[s-2]
    prods = []
    for t in range(1, T + 1):
        prods.append(math.prod(Lt[s - 2] + 1.0 for s in range(t + 1, T + 1)))
    return prods


def stagewise_upper_bound(per_stage_dKA, bounds: LipschitzBounds) -> float:
    """``sum_t d_t * prod_{s>t} (L_s + 1)``."""
    d = [float(v) for v in per_stage_dKA]
    if any(v < 0 for v in d):
        raise DomainError("stage distances must be nonnegative")
    return float(sum(dt * p for dt, p in zip(d, _tail_products(bounds.Lt, len(d)))))


def error_bound(n: int, r1: int, L: LipschitzBounds, c: float, T: int) -> float:
    """``c * L1 * n**(-1/r1) * sum_t prod_{s>t} (L_s + 1)``; reporting only."""
    if n < 1 or r1 < 1:
        raise DomainError("need n >= 1 and r1 >= 1")
    if not c > 0:
        raise DomainError("c must be positive")
    return float(c * L.L1 * n ** (-1.0 / r1) * sum(_tail_products(L.Lt, T)))


def distance_report(tree_a: ScenarioTree, tree_b: ScenarioTree) -> dict:
    """Nested distance, per-stage distances and the stage-wise bound."""
    d = per_stage_distances(tree_a, tree_b)
    L = empirical_lipschitz([tree_a, tree_b])
    return {"nested": nested_distance(tree_a, tree_b), "per_stage_dKA": d,
            "stagewise_bound": stagewise_upper_bound(d, L), "lipschitz": list(L.Lt)}
