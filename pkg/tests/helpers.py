"""Shared oracles and generators for the test suite."""

import itertools

import numpy as np
from scipy import integrate
from scipy.optimize import linprog

from fretree.distributions import SampleState, quantile
from fretree.dp import BudgetSet, StageModel
from fretree.flood import utility
from fretree.tree import path_probability, tree_from_nested


def random_nested(rng, depth, max_branch=3, value_scale=1.0):
    def level(d):
        k = int(rng.integers(1, max_branch + 1))
        probs = rng.dirichlet(np.ones(k))
        vals = np.sort(rng.normal(0.0, value_scale, k))
        return [(float(v), float(p), level(d - 1) if d > 1 else []) for v, p in zip(vals, probs)]

    return level(depth)


def random_tree(rng, depth, max_branch=3, value_scale=1.0):
    return tree_from_nested(random_nested(rng, depth, max_branch, value_scale))


def vertex_enumeration_cost(C, a, b):
    """Minimum cost over basic feasible solutions of the transportation polytope."""
    C = np.asarray(C, dtype=float)
    m, n = C.shape
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1
    for j in range(n):
        A[m + j, j::n] = 1
    rhs = np.concatenate([a, b])
    best = np.inf
    for cells in itertools.combinations(range(m * n), m + n - 1):
        sub = A[:, cells]
        if np.linalg.matrix_rank(sub) < m + n - 1:
            continue
        x, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
        if np.max(np.abs(sub @ x - rhs)) > 1e-12 or np.min(x) < -1e-12:
            continue
        best = min(best, float(C.ravel()[list(cells)] @ x))
    return best


def _leaf_paths(tree):
    out = []
    for leaf in tree.leaves:
        out.append([n for n in tree.path(leaf.id)])
    return out


def flattened_nested_distance(tree_a, tree_b):
    """Nested distance as one LP over leaf pairs with conditional-marginal constraints."""
    pa, pb = _leaf_paths(tree_a), _leaf_paths(tree_b)
    na, nb = len(pa), len(pb)
    cost = np.array([[sum(abs(x.value - y.value) for x, y in zip(p, q)) for q in pb] for p in pa])
    rows, rhs = [], []

    def var(i, j):
        return i * nb + j

    for i, p in enumerate(pa):
        r = np.zeros(na * nb)
        for j in range(nb):
            r[var(i, j)] = 1
        rows.append(r)
        rhs.append(path_probability(tree_a, p[-1].id))
    for j, q in enumerate(pb):
        r = np.zeros(na * nb)
        for i in range(na):
            r[var(i, j)] = 1
        rows.append(r)
        rhs.append(path_probability(tree_b, q[-1].id))

    T = tree_a.stages
    for t in range(1, T):
        for u in tree_a.stage_nodes(t):
            for v in tree_b.stage_nodes(t):
                in_u = [i for i, p in enumerate(pa) if p[t - 1].id == u.id]
                in_v = [j for j, q in enumerate(pb) if q[t - 1].id == v.id]
                block = np.zeros(na * nb)
                for i in in_u:
                    for j in in_v:
                        block[var(i, j)] = 1
                for child in tree_a.children(u.id):
                    r = -child.prob * block
                    for i in in_u:
                        if pa[i][t].id == child.id:
                            for j in in_v:
                                r[var(i, j)] += 1
                    rows.append(r)
                    rhs.append(0.0)
                for child in tree_b.children(v.id):
                    r = -child.prob * block
                    for j in in_v:
                        if pb[j][t].id == child.id:
                            for i in in_u:
                                r[var(i, j)] += 1
                    rows.append(r)
                    rhs.append(0.0)
    res = linprog(cost.ravel(), A_eq=np.array(rows), b_eq=np.array(rhs), bounds=(0, None),
                  method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def oracle_triple(params, N):
    """Smallest value, median and largest value sitting at their quantile positions."""
    return (quantile(params, 1.0 - 0.5 ** (1.0 / N)),
            quantile(params, 0.5),
            quantile(params, 0.5 ** (1.0 / N)))


def oracle_state(params, N):
    x1, xs, xN = oracle_triple(params, N)
    return SampleState.from_values(np.concatenate([[x1], np.full(N - 2, xs), [xN]]))


def quad_distortion(params, points):
    """Independent route: per-cell quadrature of |Q(p) - z| in probability space."""
    z = np.asarray(points, dtype=float)
    q = 0.5 * (z[:-1] + z[1:])
    from fretree.distributions import cdf
    F = np.concatenate([[0.0], cdf(params, q), [1.0]])
    total = 0.0
    for i, zi in enumerate(z):
        pz = min(max(cdf(params, zi), F[i]), F[i + 1])
        for a, b in ((F[i], pz), (pz, F[i + 1])):
            if b > a:
                total += integrate.quad(lambda p: abs(quantile(params, p) - zi), a, b,
                                        limit=500, epsabs=1e-12)[0]
    return total


def lattice(n=50):
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    m = i + j <= n
    return np.stack([i[m], j[m], n - i[m] - j[m]], axis=1) / n


def two_stage_grid(cfg, spec, n=50):
    """Nested brute force for a T=2 tree given as [(xi1, p1, xi2), ...] with one child each."""
    W = lattice(n)
    pz0 = (1 + cfg.V) * sum(x * p for x, p, _ in spec)
    B = cfg.alpha * cfg.S0
    x, c, z = B * W[:, 0], B * W[:, 1], B * W[:, 2] / pz0
    val = (1 - cfg.beta) * utility(c, cfg.gamma)
    for xi, p, xn in spec:
        S1 = ((1 - cfg.delta) * cfg.S0 + x) * (1 - xi) + z * xi
        B1 = cfg.alpha * S1[:, None]
        x1, c1, z1 = B1 * W[:, 0], B1 * W[:, 1], B1 * W[:, 2] / ((1 + cfg.V) * xn)
        S2 = ((1 - cfg.delta) * S1[:, None] + x1) * (1 - xn) + z1 * xn
        best = ((1 - cfg.beta) * utility(c1, cfg.gamma) + cfg.beta * utility(S2, cfg.gamma)).max(1)
        val = val + p * best
    return val.max()


def abs_values(tree):
    def rec(pid):
        return [(abs(n.value), n.prob, rec(n.id)) for n in tree.children(pid)]
    return rec(None)


def convex_model(rng):
    a, c1, c2 = rng.uniform(0.1, 1.0, 3)
    b0 = rng.uniform(0.0, 1.0)
    k = rng.uniform(0, 1.9) * np.sqrt(a * c1)
    w1, w2 = rng.uniform(0.0, 0.5, 2)
    q, r = rng.uniform(0.05, 0.5), rng.uniform(0.0, 1.0)

    def reward(s, d, xi, t):
        return (a * s * s + b0 * s + c1 * d[:, 0] ** 2 + c2 * d[:, 1] ** 2 + k * s * d[:, 0]) * (1 + xi)

    def reward_grad(s, d, xi, t):
        return np.stack([(2 * c1 * d[:, 0] + k * s) * (1 + xi), 2 * c2 * d[:, 1] * (1 + xi)], axis=1)

    return StageModel(
        ("x1", "x2"), reward, reward_grad,
        transition=lambda s, d, xi: (1 + xi) * s + w1 * d[:, 0] ** 2 + w2 * d[:, 1],
        transition_grad=lambda s, d, xi: np.stack([2 * w1 * d[:, 0], np.full(len(s), w2)], axis=1),
        terminal=lambda s: q * s * s + r * s,
        terminal_grad=lambda s: 2 * q * s + r,
        feasible=BudgetSet(lambda x, p, t: np.ones(2), lambda s, t: np.ones_like(s)),
        sense="minimize")
