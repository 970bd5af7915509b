"""W1-optimal quantization of scalar distributions by Lloyd iteration.

A quantizer with supporting points ``z_1 < ... < z_n`` assigns every draw to
its nearest point, so cell boundaries are midpoints of adjacent points and
probabilities are CDF increments between them. Under the absolute-distance
cost the best representative of a cell is its conditional median, which
gives the fixed-point map

    z_i <- Q((F(q_{i-1}) + F(q_i)) / 2),   q_i = (z_i + z_{i+1}) / 2.

Distortion integrals are evaluated in probability space,
``sum_i int_{cell i} |Q(p) - z_i| dp``, which never truncates an unbounded
support.

Location-scale views carry their standardized form; Lloyd runs on the
standard law and maps the result back, so a rescaled distribution yields
exactly the same probabilities and proportionally scaled points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, linalg, special

from ._numerics import loglog_slope
from .distributions import FrechetParams
from .errors import ConvergenceWarning, DomainError, InfiniteMeanError


@dataclass(frozen=True)
class DistributionView:
    """A scalar law seen through its CDF and quantile function.

    ``partial_mean(a, b)`` returns ``int_a^b Q(p) dp``; when omitted, distortion
    falls back to adaptive quadrature. ``standard``/``loc``/``scale`` describe
    the law as ``loc + scale * X`` with ``X`` distributed as ``standard``.
    """

    cdf: Callable
    quantile: Callable
    finite_mean: bool = True
    partial_mean: Optional[Callable] = None
    pdf: Optional[Callable] = None
    standard: Optional["DistributionView"] = None
    loc: float = 0.0
    scale: float = 1.0
    name: str = "custom"
    atoms: Optional[np.ndarray] = field(default=None, repr=False)


def _frechet_partial_mean(lam: float):
    a1 = 1.0 - lam
    g = special.gamma(a1)

    def partial(a, b):
        # int_a^b (-log p)^(-lam) dp = Gamma(1-lam) * [P(1-lam, -log a) - P(1-lam, -log b)]
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        with np.errstate(divide="ignore"):
            ta = np.where(a > 0, -np.log(np.where(a > 0, a, 1.0)), np.inf)
            tb = np.where(b < 1, -np.log(np.where(b < 1, b, 0.5)), 0.0)
        lower = special.gammainc(a1, ta) - special.gammainc(a1, tb)
        upper = special.gammaincc(a1, tb) - special.gammaincc(a1, ta)
        return g * np.where(tb > 1.0, upper, lower)

    return partial


def standard_frechet_view(lam: float) -> DistributionView:
    """Fréchet law with ``epsilon = 0`` and ``u = 1``."""
    if not lam > 0:
        raise DomainError("shape must be positive")

    def cdf(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            out = np.where(x > 0, np.exp(-np.power(np.where(x > 0, x, 1.0), -1.0 / lam)), 0.0)
        return out

    def quantile(p):
        p = np.asarray(p, dtype=float)
        with np.errstate(divide="ignore"):
            return np.power(-np.log(p), -lam)

    def pdf(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            xs = np.where(x > 0, x, 1.0)
            w = np.power(xs, -1.0 / lam)
            out = np.where(x > 0, w * np.exp(-w) / (lam * xs), 0.0)
        return out

    finite = lam < 1
    return DistributionView(cdf=cdf, quantile=quantile, finite_mean=finite, pdf=pdf,
                            partial_mean=_frechet_partial_mean(lam) if finite else None,
                            name=f"frechet(lambda={lam:g})")


def frechet_view(params: FrechetParams) -> DistributionView:
    std = standard_frechet_view(params.lam)
    return location_scale(std, params.epsilon, params.scale, name=f"frechet{params.to_dict()}")


def uniform_view(lo: float = 0.0, hi: float = 1.0) -> DistributionView:
    if not hi > lo:
        raise DomainError("uniform view needs hi > lo")

    def cdf(x):
        return np.clip(np.asarray(x, dtype=float), 0.0, 1.0)

    def quantile(p):
        return np.asarray(p, dtype=float)

    def partial(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return 0.5 * (b * b - a * a)

    def pdf(x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= 0) & (x <= 1), 1.0, 0.0)

    std = DistributionView(cdf=cdf, quantile=quantile, partial_mean=partial, pdf=pdf,
                           name="uniform(0,1)")
    return location_scale(std, lo, hi - lo, name=f"uniform({lo:g},{hi:g})")


def location_scale(std: DistributionView, loc: float, scale: float, name: str = None) -> DistributionView:
    """View of ``loc + scale * X`` with ``X ~ std``."""
    if not scale > 0:
        raise DomainError("scale must be positive")
    if std.standard is not None:
        loc, scale = loc + scale * std.loc, scale * std.scale
        std = std.standard

    def cdf(x):
        return std.cdf((np.asarray(x, dtype=float) - loc) / scale)

    def quantile(p):
        return loc + scale * np.asarray(std.quantile(p), dtype=float)

    pdf = None
    if std.pdf is not None:
        def pdf(x):
            return std.pdf((np.asarray(x, dtype=float) - loc) / scale) / scale

    partial = None
    if std.partial_mean is not None:
        def partial(a, b):
            a = np.asarray(a, dtype=float)
            b = np.asarray(b, dtype=float)
            return loc * (b - a) + scale * std.partial_mean(a, b)

    return DistributionView(cdf=cdf, quantile=quantile, finite_mean=std.finite_mean,
                            partial_mean=partial, pdf=pdf, standard=std, loc=loc, scale=scale,
                            name=name or f"{std.name}*{scale:g}+{loc:g}")


def discrete_view(atoms, weights) -> DistributionView:
    """Finite-support law; quantile is the left-continuous generalized inverse."""
    atoms = np.asarray(atoms, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(atoms, kind="stable")
    atoms, weights = atoms[order], weights[order]
    cum = np.cumsum(weights)
    cum[-1] = 1.0

    def cdf(x):
        idx = np.searchsorted(atoms, np.asarray(x, dtype=float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def quantile(p):
        idx = np.searchsorted(cum, np.asarray(p, dtype=float), side="left")
        return atoms[np.minimum(idx, atoms.size - 1)]

    lower = np.concatenate([[0.0], cum[:-1]])

    def partial(a, b):
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        overlap = np.clip(np.minimum(cum, b) - np.maximum(lower, a), 0.0, None)
        return overlap @ atoms

    return DistributionView(cdf=cdf, quantile=quantile, partial_mean=partial,
                            name="discrete", atoms=atoms)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LloydConfig:
    init: Union[str, Sequence[float]] = "quantile-spread"
    max_iters: int = 10_000
    rel_tol: float = 1e-10
    multistart: int = 1
    seed: int = 0
    track_distortion: bool = False

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise DomainError("rel_tol must be positive")
        if self.max_iters < 1 or self.multistart < 1:
            raise DomainError("max_iters and multistart must be at least 1")


@dataclass(frozen=True)
class Quantization:
    points: np.ndarray
    probabilities: np.ndarray
    breakpoints: np.ndarray
    distortion: float
    iterations: int = 0
    converged: bool = True
    history: tuple = field(default=(), repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(self.points.size)

    def to_dict(self) -> dict:
        return {
            "points": [float(v) for v in self.points],
            "probabilities": [float(v) for v in self.probabilities],
            "breakpoints": [float(v) for v in self.breakpoints],
            "distortion": float(self.distortion),
        }


def _require_finite(dist: DistributionView):
    if not dist.finite_mean:
        raise InfiniteMeanError("distortion is infinite for a law without a finite mean")


def probabilities_from_breakpoints(dist: DistributionView, breakpoints) -> np.ndarray:
    """CDF increments between consecutive breakpoints, with -inf and +inf at the ends."""
    q = np.asarray(breakpoints, dtype=float)
    if q.size and np.any(np.diff(q) <= 0):
        raise DomainError("breakpoints must be strictly increasing")
    F = np.concatenate([[0.0], np.asarray(dist.cdf(q), dtype=float).reshape(-1), [1.0]])
    return np.diff(F)


def _cell_integral_quad(dist, a, b, z):
    """int_a^b |Q(p) - z| dp by adaptive quadrature, split where Q crosses z."""
    if b <= a:
        return 0.0
    pz = float(np.clip(dist.cdf(z), a, b))
    total = 0.0
    opts = dict(epsabs=1e-11, epsrel=1e-11, limit=400)
    if pz > a:
        total += integrate.quad(lambda p: abs(float(dist.quantile(p)) - z), a, pz, **opts)[0]
    if b > pz:
        total += integrate.quad(lambda p: abs(float(dist.quantile(p)) - z), pz, b, **opts)[0]
    return total


def _distortion_cells(dist: DistributionView, points: np.ndarray) -> float:
    """Distortion in standardized coordinates when possible."""
    if dist.standard is not None:
        std_points = (points - dist.loc) / dist.scale
        return dist.scale * _distortion_cells(dist.standard, std_points)
    q = 0.5 * (points[:-1] + points[1:])
    F = np.concatenate([[0.0], np.asarray(dist.cdf(q), dtype=float).reshape(-1), [1.0]])
    lo, hi = F[:-1], F[1:]
    pz = np.clip(np.asarray(dist.cdf(points), dtype=float).reshape(-1), lo, hi)
    if dist.partial_mean is not None:
        pm = dist.partial_mean
        below = points * (pz - lo) - np.asarray(pm(lo, pz), dtype=float)
        above = np.asarray(pm(pz, hi), dtype=float) - points * (hi - pz)
        return float(np.sum(np.maximum(below, 0.0) + np.maximum(above, 0.0)))
    return float(sum(_cell_integral_quad(dist, a, b, z) for a, b, z in zip(lo, hi, points)))


def distortion(dist: DistributionView, points) -> float:
    """Expected distance from a draw to its nearest point: ``sum_i int_cell |Q(p) - z_i| dp``."""
    _require_finite(dist)
    z = np.asarray(points, dtype=float).reshape(-1)
    if z.size == 0 or np.any(np.diff(z) <= 0):
        raise DomainError("points must be a nonempty strictly increasing sequence")
    return _distortion_cells(dist, z)


def _initial_points(dist, n, config, start):
    if start == 0:
        if isinstance(config.init, str):
            if config.init != "quantile-spread":
                raise DomainError(f"unknown init {config.init!r}")
            return np.asarray(dist.quantile((2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)), dtype=float)
        pts = np.sort(np.asarray(config.init, dtype=float).reshape(-1))
        if pts.size != n:
            raise DomainError(f"init has {pts.size} points, expected {n}")
        return pts
    rng = np.random.default_rng([config.seed, start])
    base = (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)
    jitter = rng.uniform(-0.5, 0.5, n) / n
    probs = np.sort(np.clip(base + jitter, 0.25 / n, 1.0 - 0.25 / n))
    return np.asarray(dist.quantile(probs), dtype=float)


def _deduplicate(points):
    # keep points strictly increasing when an iterate collapses two cells
    pts = points.copy()
    for i in range(1, pts.size):
        if pts[i] <= pts[i - 1]:
            pts[i] = np.nextafter(pts[i - 1], np.inf)
    return pts


def _lloyd_map(dist, z):
    q = 0.5 * (z[:-1] + z[1:])
    F = np.concatenate([[0.0], np.asarray(dist.cdf(q), dtype=float).reshape(-1), [1.0]])
    return q, np.asarray(dist.quantile(0.5 * (F[:-1] + F[1:])), dtype=float).reshape(-1)


def _newton_step(dist, z, q, t):
    """Newton step for ``z = T(z)``; the Jacobian of T is tridiagonal.

    On positive supports the step is taken in log coordinates, where heavy
    right tails are far less nonlinear. Returns a function of the damping
    factor giving the candidate points, or None.
    """
    n = z.size
    fq = np.concatenate([[0.0], np.asarray(dist.pdf(q), dtype=float).reshape(-1), [0.0]])
    ft = np.asarray(dist.pdf(t), dtype=float).reshape(-1)
    if not np.all(np.isfinite(ft)) or np.any(ft <= 0):
        return None
    w = 0.25 / ft
    diag = w * (fq[:-1] + fq[1:])
    upper = w[:-1] * fq[1:-1]
    lower = w[1:] * fq[1:-1]
    log_coords = bool(np.all(z > 0) and np.all(t > 0))
    if log_coords:
        # d log T_i / d log z_j = J_ij z_j / T_i
        diag = diag * z / t
        upper = upper * z[1:] / t[:-1]
        lower = lower * z[:-1] / t[1:]
        rhs = np.log(t) - np.log(z)
    else:
        rhs = t - z
    ab = np.zeros((3, n))
    ab[1] = 1.0 - diag
    ab[0, 1:] = -upper
    ab[2, :-1] = -lower
    try:
        step = linalg.solve_banded((1, 1), ab, rhs)
    except (linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(step)):
        return None
    if log_coords:
        return lambda damping: z * np.exp(damping * step)
    return lambda damping: z + damping * step


def _fp_residual(z, t):
    if np.all(z > 0) and np.all(t > 0):
        return float(np.max(np.abs(np.log(t) - np.log(z))))
    return float(np.max(np.abs(t - z)))


def _lloyd_single(dist, n, config, start):
    """Lloyd alternation, accelerated by damped Newton steps when a density is known.

    A Newton candidate is kept only if it shrinks the fixed-point residual
    and does not raise the distortion beyond rounding; otherwise the plain
    Lloyd update is used, so the recorded distortion never increases.
    """
    z = _deduplicate(_initial_points(dist, n, config, start))
    use_newton = dist.pdf is not None and n > 1
    check_d = use_newton and dist.partial_mean is not None
    d_cur = _distortion_cells(dist, z) if (config.track_distortion or check_d) else None
    history = [d_cur] if config.track_distortion else []
    tiny = np.finfo(float).tiny
    converged = False
    it = 0
    q, t = _lloyd_map(dist, z)
    for it in range(1, config.max_iters + 1):
        new = None
        if use_newton:
            move_to = _newton_step(dist, z, q, t)
            res = _fp_residual(z, t)
            damping = 1.0
            while move_to is not None and damping > 1e-3:
                cand = move_to(damping)
                damping *= 0.5
                if not np.all(np.isfinite(cand)) or np.any(np.diff(cand) <= 0):
                    continue
                cq, ct = _lloyd_map(dist, cand)
                if not _fp_residual(cand, ct) < res:
                    continue
                d_new = _distortion_cells(dist, cand) if d_cur is not None else None
                if d_new is None or d_new <= d_cur * (1.0 + 4 * np.finfo(float).eps):
                    new, q, t = cand, cq, ct
                    break
        if new is None:
            new = _deduplicate(t)
            q, t = _lloyd_map(dist, new)
            d_new = _distortion_cells(dist, new) if d_cur is not None else None
        move = np.max(np.abs(new - z) / np.maximum(np.abs(z), tiny))
        z, d_cur = new, d_new
        if config.track_distortion:
            history.append(d_cur)
        if move < config.rel_tol:
            converged = True
            break
    return z, it, converged, tuple(history)


def _finish(dist, z, it, converged, history):
    q = 0.5 * (z[:-1] + z[1:])
    p = probabilities_from_breakpoints(dist, q)
    return Quantization(points=z, probabilities=p, breakpoints=q,
                        distortion=_distortion_cells(dist, z), iterations=it,
                        converged=converged, history=history)


def lloyd_w1(dist: DistributionView, n: int, config: LloydConfig = LloydConfig()) -> Quantization:
    """Optimal ``n``-point quantizer under the absolute-distance cost.

    Location-scale views are quantized in standardized coordinates and mapped
    back. With ``multistart > 1`` the lowest-distortion run wins (ties go to
    the lowest start index).
    """
    _require_finite(dist)
    if n < 1:
        raise DomainError("n must be at least 1")
    if dist.standard is not None:
        std_config = config
        if not isinstance(config.init, str):
            std_init = (np.asarray(config.init, dtype=float) - dist.loc) / dist.scale
            std_config = replace(config, init=tuple(std_init))
        std_q = lloyd_w1(dist.standard, n, std_config)
        return _affine(std_q, dist.loc, dist.scale)

    best = None
    for start in range(config.multistart):
        z, it, ok, hist = _lloyd_single(dist, n, config, start)
        cand = _finish(dist, z, it, ok, hist)
        if best is None or cand.distortion < best.distortion:
            best = cand
    if not best.converged:
        warnings.warn(f"Lloyd iteration did not converge in {config.max_iters} iterations "
                      f"(n={n}, {dist.name}); returning last iterate", ConvergenceWarning,
                      stacklevel=2)
    return best


def _affine(q: Quantization, loc: float, ratio: float) -> Quantization:
    return Quantization(points=loc + ratio * q.points, probabilities=q.probabilities.copy(),
                        breakpoints=loc + ratio * q.breakpoints,
                        distortion=ratio * q.distortion, iterations=q.iterations,
                        converged=q.converged,
                        history=tuple(ratio * h for h in q.history))


def scale(q: Quantization, ratio: float) -> Quantization:
    """Multiply points, breakpoints and distortion by ``ratio``; probabilities are kept."""
    if not ratio > 0:
        raise DomainError(f"ratio must be positive, got {ratio}")
    return _affine(q, 0.0, float(ratio))


@dataclass(frozen=True)
class ConvergenceProbe:
    pairs: tuple
    slope: float


def convergence_probe(dist: DistributionView, n_values, config: LloydConfig = LloydConfig()) -> ConvergenceProbe:
    """Distortion for each ``n`` and the log-log regression slope of distortion on ``n``."""
    n_values = [int(n) for n in n_values]
    if len(n_values) < 2:
        raise DomainError("need at least two values of n")
    pairs = tuple((n, lloyd_w1(dist, n, config).distortion) for n in n_values)
    slope = loglog_slope([p[0] for p in pairs], [p[1] for p in pairs])
    return ConvergenceProbe(pairs=pairs, slope=float(slope))


def fixed_point_residuals(dist: DistributionView, q: Quantization) -> tuple:
    """Largest midpoint-rule and median-rule violations of a quantization."""
    z, br = q.points, q.breakpoints
    mid = float(np.max(np.abs(br - 0.5 * (z[:-1] + z[1:])) / np.abs(z[:-1]))) if z.size > 1 else 0.0
    F = np.concatenate([[0.0], np.asarray(dist.cdf(br), dtype=float).reshape(-1), [1.0]])
    med = float(np.max(np.abs(F[:-1] + F[1:] - 2.0 * np.asarray(dist.cdf(z), dtype=float).reshape(-1))))
    return mid, med


__all__ = [
    "DistributionView", "LloydConfig", "Quantization", "ConvergenceProbe",
    "standard_frechet_view", "frechet_view", "uniform_view", "location_scale", "discrete_view",
    "lloyd_w1", "distortion", "probabilities_from_breakpoints", "scale",
    "convergence_probe", "fixed_point_residuals",
]
