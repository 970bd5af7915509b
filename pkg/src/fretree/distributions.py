"""Fréchet loss distributions: evaluation, sampling, quick estimation and updates.

The Fréchet law used throughout has CDF

    F(xi) = exp(-((xi - epsilon) / (u - epsilon)) ** (-1 / lam)),  xi > epsilon

with shape ``lam > 0``, lower limit ``epsilon`` and second location ``u``
(``F(u) = 1/e``). The median is ``epsilon + (u - epsilon) * log(2) ** (-lam)``.

Parameter estimation from a sample uses the three-order-statistic method
(smallest value, median, largest value). Samples that fall below a risk
threshold are absorbed by rescaling the location parameters with the ratio
of the new to the old sample median, which keeps the shape fixed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from ._numerics import golden_section
from .errors import (
    DegenerateEstimateError,
    DomainError,
    EstimationError,
    FitError,
    InfiniteMeanError,
    ParameterError,
)

LOG2 = math.log(2.0)

#: default shape search grid: [0.01, 5] split into 500 cells
DEFAULT_LAMBDA_GRID = (0.01, 5.0, 500)


@dataclass(frozen=True)
class FrechetParams:
    """Shape ``lam``, second location ``u`` and lower limit ``epsilon``."""

    lam: float
    u: float
    epsilon: float = 0.0

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ParameterError(f"shape must be positive, got lambda={self.lam}")
        if not (self.u > self.epsilon):
            raise ParameterError(f"need u > epsilon, got u={self.u}, epsilon={self.epsilon}")

    @property
    def scale(self) -> float:
        return self.u - self.epsilon

    @property
    def median(self) -> float:
        return self.epsilon + self.scale * LOG2 ** (-self.lam)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "u": self.u, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "FrechetParams":
        return cls(lam=float(d["lambda"]), u=float(d["u"]), epsilon=float(d.get("epsilon", 0.0)))

    @classmethod
    def from_median(cls, lam: float, median: float, epsilon: float = 0.0) -> "FrechetParams":
        """Parameters with a given median: ``u - eps = (median - eps) * log(2)**lam``."""
        return cls(lam=lam, u=epsilon + (median - epsilon) * LOG2**lam, epsilon=epsilon)


def cdf(params: FrechetParams, xi):
    """Distribution function; zero at and below ``epsilon``."""
    xi = np.asarray(xi, dtype=float)
    z = (xi - params.epsilon) / params.scale
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = np.where(z > 0, np.exp(-np.power(np.where(z > 0, z, 1.0), -1.0 / params.lam)), 0.0)
    return out if out.ndim else float(out)


def quantile(params: FrechetParams, p):
    """Inverse CDF ``epsilon + (u - epsilon) * (-log p) ** (-lam)`` for p in (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("quantile probabilities must lie in (0, 1)")
    out = params.epsilon + params.scale * np.power(-np.log(p), -params.lam)
    return out if out.ndim else float(out)


def _require_finite_mean(params: FrechetParams):
    if params.lam >= 1:
        raise InfiniteMeanError(f"Frechet mean is infinite for lambda={params.lam} >= 1")


def mean(params: FrechetParams) -> float:
    """First moment ``epsilon + (u - epsilon) * Gamma(1 - lam)``; finite only for lam < 1."""
    _require_finite_mean(params)
    return params.epsilon + params.scale * special.gamma(1.0 - params.lam)


def tail_integral(params: FrechetParams, level: float) -> float:
    """Numerical value of the integral of the quantile function over [level, 1].

    With ``p = exp(-t)`` the integrand becomes ``(eps + s t**-lam) e**-t`` on
    ``[0, -log level]``; the ``t**-lam`` endpoint singularity is handled by an
    algebraic-weight rule on [0, 1] and the remainder by plain adaptive quadrature.
    """
    _require_finite_mean(params)
    if not 0 <= level < 1:
        raise DomainError("level must lie in [0, 1)")
    t_hi = math.inf if level == 0 else -math.log(level)
    s, lam = params.scale, params.lam
    head_hi = min(1.0, t_hi)
    head, _ = integrate.quad(lambda t: math.exp(-t), 0.0, head_hi, weight="alg",
                             wvar=(-lam, 0.0), epsabs=1e-13, epsrel=1e-12, limit=200)
    total = s * head
    if t_hi > 1.0:
        tail, _ = integrate.quad(lambda t: t ** (-lam) * math.exp(-t), 1.0, t_hi,
                                 epsabs=1e-13, epsrel=1e-12, limit=200)
        total += s * tail
    return total + params.epsilon * (1.0 - level)


def avar(params: FrechetParams, level: float) -> float:
    """Average value-at-risk: mean of the quantile function above ``level``."""
    return tail_integral(params, level) / (1.0 - level)


def sample(params: FrechetParams, n: int, seed=None) -> np.ndarray:
    """Inverse-transform sample of size ``n``; deterministic for a given seed."""
    if n < 1:
        raise DomainError("sample size must be at least 1")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return params.epsilon + params.scale * np.power(-np.log(u), -params.lam)


# --------------------------------------------------------------------------
# Sample summaries and classification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleState:
    """Sorted sample with its smallest value, median and largest value."""

    sorted_values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.sort(np.asarray(self.sorted_values, dtype=float))
        if v.ndim != 1 or v.size < 3:
            raise DomainError("a sample summary needs at least 3 values")
        v.setflags(write=False)
        object.__setattr__(self, "sorted_values", v)

    @classmethod
    def from_values(cls, values) -> "SampleState":
        return cls(np.asarray(values, dtype=float))

    @property
    def N(self) -> int:
        return int(self.sorted_values.size)

    @property
    def x1(self) -> float:
        return float(self.sorted_values[0])

    @property
    def xN(self) -> float:
        return float(self.sorted_values[-1])

    @property
    def xs(self) -> float:
        v, n = self.sorted_values, self.sorted_values.size
        if n % 2:
            return float(v[n // 2])
        return 0.5 * (float(v[n // 2 - 1]) + float(v[n // 2]))

    def append(self, x: float) -> "SampleState":
        v = self.sorted_values
        return SampleState(np.insert(v, np.searchsorted(v, x), x))

    def __repr__(self):
        return f"SampleState(N={self.N}, x1={self.x1:.6g}, xs={self.xs:.6g}, xN={self.xN:.6g})"


class SampleClass(str, enum.Enum):
    GROUP1_CASE1 = "Group1Case1"
    GROUP2_CASE2 = "Group2Case2"
    GROUP2_CASE3 = "Group2Case3"

    @property
    def group(self) -> str:
        return "G1" if self is SampleClass.GROUP1_CASE1 else "G2"


def classify(summary: SampleState, params: FrechetParams, new_point: float,
             threshold: float = 0.5) -> SampleClass:
    """Assign a new realisation to Group 1 (below the risk threshold) or Group 2."""
    if cdf(params, new_point) <= threshold:
        return SampleClass.GROUP1_CASE1
    if new_point > summary.xN:
        return SampleClass.GROUP2_CASE3
    return SampleClass.GROUP2_CASE2


# --------------------------------------------------------------------------
# Three-order-statistic estimation
# --------------------------------------------------------------------------


def g_function(lam, N: int):
    """Right-hand side of the order-statistic shape equation.

    ``g(lam, N) = (N**lam - 1) / (1 - f(lam, N) * log(2)**lam)`` with
    ``f(lam, N) = (-log(1 - 0.5**(1/N)))**(-lam)``.
    """
    if N < 3:
        raise DomainError("N must be at least 3")
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise DomainError("lambda must be positive")
    a = -math.log1p(-(0.5 ** (1.0 / N)))
    f = np.power(a, -lam_arr)
    denom = 1.0 - f * np.power(LOG2, lam_arr)
    if np.any(denom <= 0):
        raise EstimationError(f"g(lambda, N) denominator is not positive (lambda={lam}, N={N})")
    out = np.expm1(lam_arr * math.log(N)) / denom
    return out if out.ndim else float(out)


def _location_from_shape(summary: SampleState, lam: float) -> FrechetParams:
    nl = float(summary.N) ** lam
    eps = (summary.xs * nl - summary.xN) / (nl - 1.0)
    if eps >= summary.xs:
        raise DegenerateEstimateError(
            f"estimated epsilon={eps:.6g} is not below the median {summary.xs:.6g}")
    return FrechetParams(lam=lam, u=eps + (summary.xs - eps) * LOG2**lam, epsilon=eps)


def gumbel_estimate(summary: SampleState, lambda_grid=DEFAULT_LAMBDA_GRID,
                    tol: float = 1e-13) -> FrechetParams:
    """Estimate (lambda, u, epsilon) from the smallest value, median and largest value.

    The shape solves ``(xN - xs)/(xs - x1) = g(lambda, N)``. The residual is
    scanned on a grid; every cell where it changes sign is refined by golden
    section on ``|residual|``, and the best root wins (ties go to the smaller
    shape). Location parameters follow in closed form.
    """
    x1, xs, xN, N = summary.x1, summary.xs, summary.xN, summary.N
    if not (x1 < xs < xN):
        raise EstimationError(f"need x1 < xs < xN, got {x1}, {xs}, {xN}")
    lhs = (xN - xs) / (xs - x1)
    lo, hi, cells = lambda_grid
    grid = np.linspace(lo, hi, int(cells) + 1)
    resid = lhs - g_function(grid, N)
    sign = np.sign(resid)
    brackets = np.flatnonzero(sign[:-1] * sign[1:] <= 0)
    if brackets.size == 0:
        raise EstimationError(
            f"no shape in [{lo}, {hi}] brackets the order-statistic ratio {lhs:.6g} (N={N})")

    def absres(lam):
        return abs(lhs - g_function(lam, N))

    best = None
    for k in brackets:
        lam, r = golden_section(absres, grid[k], grid[k + 1], tol=tol)
        if best is None or r < best[1]:
            best = (lam, r)
    return _location_from_shape(summary, best[0])


def quick_update(params: FrechetParams, median_ratio: float) -> FrechetParams:
    """Group-1 update: shape unchanged, both location parameters scaled by the median ratio."""
    if not median_ratio > 0:
        raise DomainError(f"median ratio must be positive, got {median_ratio}")
    return FrechetParams(lam=params.lam, u=params.u * median_ratio,
                         epsilon=params.epsilon * median_ratio)


def append_and_update(state: SampleState, params: FrechetParams, new_point: float,
                      threshold: float = 0.5, lambda_grid=DEFAULT_LAMBDA_GRID):
    """Append a realisation and update the fitted law.

    Returns ``(new_state, new_params, sample_class)``. Group-1 points use the
    median-ratio rescaling; Group-2 points trigger full re-estimation.
    """
    klass = classify(state, params, new_point, threshold)
    new_state = state.append(new_point)
    if klass is SampleClass.GROUP1_CASE1:
        new_params = quick_update(params, new_state.xs / state.xs)
    else:
        new_params = gumbel_estimate(new_state, lambda_grid)
    return new_state, new_params, klass


# --------------------------------------------------------------------------
# Quantile-table fitting (Frechet, with Weibull and Gumbel for comparison)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantileTable:
    """Rows of (cumulative probability, loss) plus the probability of no loss."""

    probabilities: np.ndarray
    losses: np.ndarray
    pnl: float | None = None

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        L = np.asarray(self.losses, dtype=float)
        if p.shape != L.shape or p.ndim != 1:
            raise FitError("probabilities and losses must be equal-length vectors")
        if np.any((p <= 0) | (p >= 1)):
            raise FitError("table probabilities must lie in (0, 1)")
        if np.any(np.diff(p) <= 0):
            raise FitError("table probabilities must be strictly increasing")
        if np.any(np.diff(L) < 0):
            raise FitError("table losses must be nondecreasing")
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "losses", L)


@dataclass(frozen=True)
class WeibullParams:
    """Three-parameter Weibull: ``Q(p) = loc + scale * (-log(1-p))**(1/shape)``."""

    shape: float
    scale: float
    loc: float = 0.0

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return self.loc + self.scale * np.power(-np.log1p(-p), 1.0 / self.shape)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "scale": self.scale, "loc": self.loc}


@dataclass(frozen=True)
class GumbelParams:
    """Gumbel (maxima): ``Q(p) = loc - scale * log(-log p)``."""

    loc: float
    scale: float

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return self.loc - self.scale * np.log(-np.log(p))

    def to_dict(self) -> dict:
        return {"loc": self.loc, "scale": self.scale}


@dataclass(frozen=True)
class TableFit:
    family: str
    params: object
    residual_norm: float
    probabilities: np.ndarray = field(repr=False)
    losses: np.ndarray = field(repr=False)
    fitted: np.ndarray = field(repr=False)

    @property
    def relative_errors(self) -> np.ndarray:
        return np.abs(self.fitted - self.losses) / self.losses

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "params": self.params.to_dict(),
            "residual_norm": self.residual_norm,
            "rows": [
                {"probability": float(p), "loss": float(L), "fitted": float(f),
                 "relative_error": float(e)}
                for p, L, f, e in zip(self.probabilities, self.losses, self.fitted,
                                      self.relative_errors)
            ],
        }


def _affine_ls(x, L):
    """Least squares ``L ~ a + b x``; returns (a, b, residual norm)."""
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, L, rcond=None)
    r = X @ coef - L
    return float(coef[0]), float(coef[1]), float(np.sqrt(r @ r))


def _shape_search(regressor, L, grid):
    """Grid over a shape parameter, affine LS for (location, scale), golden refine."""
    lo, hi, cells = grid
    nodes = np.linspace(lo, hi, int(cells) + 1)

    def norm(k):
        a, b, r = _affine_ls(regressor(k), L)
        return r if b > 0 else math.inf

    vals = np.array([norm(k) for k in nodes])
    if not np.isfinite(vals).any():
        raise FitError("no shape on the grid gives a positive scale")
    i = int(np.argmin(vals))
    a_, b_ = nodes[max(i - 1, 0)], nodes[min(i + 1, nodes.size - 1)]
    k, _ = golden_section(norm, a_, b_, tol=1e-14)
    a, b, r = _affine_ls(regressor(k), L)
    return k, a, b, r


def fit_quantile_table(table: QuantileTable, family: str = "frechet",
                       lambda_grid=DEFAULT_LAMBDA_GRID) -> TableFit:
    """Least-squares fit of a family's quantile function to the positive-loss rows."""
    family = family.lower()
    mask = table.losses > 0
    p, L = table.probabilities[mask], table.losses[mask]
    if p.size < 3:
        raise FitError(f"need at least 3 positive-loss rows, got {p.size}")
    if np.ptp(L) == 0:
        raise FitError("losses are constant: zero-scale fit")

    if family == "frechet":
        t = -np.log(p)
        lam, eps, s, r = _shape_search(lambda k: np.power(t, -k), L, lambda_grid)
        params = FrechetParams(lam=lam, u=eps + s, epsilon=eps)
        fitted = quantile(params, p)
    elif family == "weibull":
        t = -np.log1p(-p)
        shape, loc, scale, r = _shape_search(lambda k: np.power(t, 1.0 / k), L, (0.05, 20.0, 500))
        params = WeibullParams(shape=shape, scale=scale, loc=loc)
        fitted = params.quantile(p)
    elif family == "gumbel":
        loc, scale, r = _affine_ls(-np.log(-np.log(p)), L)
        if scale <= 0:
            raise FitError("Gumbel fit produced a non-positive scale")
        params = GumbelParams(loc=loc, scale=scale)
        fitted = params.quantile(p)
    else:
        raise FitError(f"unknown family {family!r}; expected frechet, weibull or gumbel")
    fitted = np.asarray(fitted, dtype=float)
    resid = float(np.sqrt(np.sum((fitted - L) ** 2)))
    return TableFit(family, params, resid, p, L, fitted)
