"""Shared test oracles.

These deliberately reimplement contracts along independent paths (scalar
loops, series expansions) so the production code is never checked against
itself.
"""

import numpy as np


def scalar_gemv_f32(x, w2d):
    """y = x W^T as an explicit float32 scalar loop, ascending column index."""
    n, m = w2d.shape
    y = np.zeros(n, dtype=np.float32)
    for j in range(n):
        acc = np.float32(0.0)
        for i in range(m):
            acc = np.float32(acc + np.float32(x[i] * w2d[j, i]))
        y[j] = acc
    return y


def erf_series(x):
    """erf via Abramowitz-Stegun style series, independent of math.erf.

    Maclaurin series for |x| < 3, asymptotic complementary expansion via
    continued fraction for the tail. Good to ~1e-13 on the range used here.
    """
    if x < 0:
        return -erf_series(-x)
    if x < 3.0:
        # erf(x) = 2/sqrt(pi) * sum_k (-1)^k x^(2k+1) / (k! (2k+1))
        total = 0.0
        term = x
        k = 0
        while abs(term) > 1e-18 * max(1.0, abs(total)):
            total += term / (2 * k + 1)
            k += 1
            term *= -x * x / k
        return 2.0 / np.sqrt(np.pi) * total
    # Lentz continued fraction for erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/(2x + 2/(x + ...)))
    tiny = 1e-300
    b = x
    c = 1e300
    d = 1.0 / b
    h = d
    for i in range(1, 300):
        a = i / 2.0
        b = x if i % 2 else 2.0 * x
        d = 1.0 / (b + a * d) if abs(b + a * d) > tiny else 1.0 / tiny
        c = b + a / c if abs(b + a / c) > tiny else tiny
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    erfc = np.exp(-x * x) / np.sqrt(np.pi) * h
    return 1.0 - erfc


def inverse_abs_gaussian_cdf(p, tol=1e-13):
    """t with P(|Z| <= t) = p for Z ~ N(0,1), by bisection over erf_series."""
    assert 0.0 <= p < 1.0
    if p == 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while erf_series(hi / np.sqrt(2.0)) < p:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if erf_series(mid / np.sqrt(2.0)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
