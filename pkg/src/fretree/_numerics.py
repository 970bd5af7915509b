"""Small numerical helpers used by several modules."""

import math

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, a, b, tol=1e-12, max_iter=200):
    """Minimise a unimodal scalar function on [a, b].

    Returns ``(x, f(x))`` for the best point seen. Stops when the bracket is
    narrower than ``tol * (1 + |x|)``.
    """
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = f(c), f(d)
    best = min((f(a), a), (f(b), b), (fc, c), (fd, d))
    for _ in range(max_iter):
        if abs(b - a) <= tol * (1.0 + abs(c)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = f(c)
            if fc < best[0]:
                best = (fc, c)
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = f(d)
            if fd < best[0]:
                best = (fd, d)
    return best[1], best[0]


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x)."""
    lx = [math.log(v) for v in x]
    ly = [math.log(v) for v in y]
    n = len(lx)
    mx = sum(lx) / n
    my = sum(ly) / n
    sxx = sum((v - mx) ** 2 for v in lx)
    sxy = sum((u - mx) * (v - my) for u, v in zip(lx, ly))
    return sxy / sxx
