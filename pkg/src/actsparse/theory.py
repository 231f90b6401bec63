"""Closed-form error of magnitude sparsification under an independent
Gaussian model, plus Monte Carlo estimators to check the formulas.

Model: x in R^m with i.i.d. N(0, sigma_x^2) entries, W in R^{n x m} with
i.i.d. N(0, sigma_w^2) entries, all independent, y = x W^T. Zeroing the
entries of x with magnitude at or below the exact Gaussian quantile t_p
gives a relative output error sqrt(p - 2 t phi(t)) with t = t_p/sigma_x,
against sqrt(p) for zeroing a uniformly random fraction p.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .tensor import RngStream

_SQRT2 = math.sqrt(2.0)
_BISECT_STEPS = 200  # interval shrinks below 1e-12 long before this


def std_normal_pdf(t: float) -> float:
    return math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def std_normal_cdf(t: float) -> float:
    # Single numeric source of truth for Phi; shared by the threshold and
    # the analytic error paths.
    return 0.5 * (1.0 + math.erf(t / _SQRT2))


def gaussian_threshold(p: float, sigma_x: float = 1.0) -> float:
    """Exact t_p with P(|X| <= t_p) = p for X ~ N(0, sigma_x^2).

    Solved by bisection on the error function to 1e-12. p=1 has no finite
    solution and returns inf.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    if not sigma_x > 0:
        raise ValueError(f"sigma_x must be positive, got {sigma_x}")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return math.inf

    def mass(t: float) -> float:
        return 2.0 * std_normal_cdf(t) - 1.0  # P(|Z| <= t)

    lo, hi = 0.0, 1.0
    while mass(hi) < p:
        hi *= 2.0
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mass(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12:
            break
    return sigma_x * 0.5 * (lo + hi)


def _pruned_mass(p: float) -> float:
    """p - 2 t phi(t) at the exact threshold: the pruned fraction of E[X^2]."""
    t = gaussian_threshold(p)
    tail = 0.0 if math.isinf(t) else 2.0 * t * std_normal_pdf(t)
    return p - tail


def scalar_error_variance(sigma_x: float, sigma_w: float, p: float) -> float:
    """Var((X - s(X)) W): variance of one pruned-entry product."""
    if not (sigma_x > 0 and sigma_w > 0):
        raise ValueError("sigmas must be positive")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    return sigma_x * sigma_x * sigma_w * sigma_w * _pruned_mass(p)


def expected_error_norm(m: int, n: int, sigma_x: float, sigma_w: float, p: float) -> float:
    """E ||(x - s(x)) W^T||_2 = sigma_x sigma_w sqrt(m n (p - 2 t phi(t)))."""
    if m < 1 or n < 1:
        raise ValueError("dimensions must be >= 1")
    return sigma_x * sigma_w * math.sqrt(m * n * _pruned_mass(p))


def relative_error_magnitude(p: float) -> float:
    """E||y - yhat|| / E||y|| for magnitude pruning; dimension- and scale-free."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    return math.sqrt(max(_pruned_mass(p), 0.0))


def relative_error_random(p: float) -> float:
    """Same ratio when a uniformly random fraction p of coordinates is zeroed."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    return math.sqrt(p)


class MaskMode(Enum):
    MAGNITUDE = "magnitude"
    RANDOM = "random"


def mc_relative_error(
    m: int,
    n: int,
    p: float,
    trials: int,
    mode: MaskMode,
    rng: RngStream,
    sigma_x: float = 1.0,
    sigma_w: float = 1.0,
) -> tuple[float, float]:
    """Monte Carlo (mean, stderr) of ||y - yhat|| / ||y|| over fresh (x, W).

    MAGNITUDE prunes |x_i| <= t_p with the exact Gaussian threshold;
    RANDOM draws a fresh Bernoulli(p) mask per trial.
    """
    if trials < 2:
        raise ValueError(f"need at least 2 trials, got {trials}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    g = rng.next_generator()
    t = gaussian_threshold(p, sigma_x) if mode is MaskMode.MAGNITUDE else None
    ratios = np.empty(trials, dtype=np.float64)
    for k in range(trials):
        x = g.standard_normal(m) * sigma_x
        w = g.standard_normal((n, m)) * sigma_w
        if mode is MaskMode.MAGNITUDE:
            pruned = np.where(np.abs(x) <= t, x, 0.0)
        else:
            pruned = np.where(g.random(m) < p, x, 0.0)
        err = w @ pruned
        y = w @ x
        ny = float(np.linalg.norm(y))
        ratios[k] = float(np.linalg.norm(err)) / ny if ny > 0 else 0.0
    mean = float(ratios.mean())
    stderr = float(ratios.std(ddof=1) / math.sqrt(trials))
    return mean, stderr
