"""Moment-matching approximation for sums of lognormal variables.

A sum S = sum_i exp(Y_i) with Y_i ~ N(mu_i, sigma2) has no closed-form
distribution; `fw_approx` fits a single lognormal exp(N(mu_y, sigma2_y)) by
matching the first two moments. `mc_sum_cdf` is the sampling oracle the fit
is validated against. All exponential sums are evaluated in log space: the
dimension count can reach 1e8 and the mu_i can be large enough that a naive
sum of exp() overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, logsumexp

_SQRT2 = math.sqrt(2.0)

# Dimension block used when accumulating Monte-Carlo sums. Fixed so that the
# draw sequence never depends on available memory or thread count.
_MC_CHUNK = 128


@dataclass(frozen=True)
class LognormalSumApprox:
    """Fitted lognormal exp(Y), Y ~ N(mu_y, sigma2_y), for a sum of lognormals."""

    mu_y: float
    sigma2_y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu_y) and self.sigma2_y > 0):
            raise ValueError(f"invalid lognormal fit: mu_y={self.mu_y} sigma2_y={self.sigma2_y}")

    def cdf(self, x):
        """CDF of the fitted lognormal, elementwise; 0 for x <= 0."""
        arr = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros_like(arr)
        pos = arr > 0
        z = (np.log(arr[pos]) - self.mu_y) / math.sqrt(self.sigma2_y)
        out[pos] = 0.5 * erfc(-z / _SQRT2)
        return float(out[0]) if np.isscalar(x) or np.ndim(x) == 0 else out


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function.

    erfc keeps full relative accuracy deep into the lower tail, unlike
    1 - erf(x/sqrt(2)) which cancels.
    """
    if math.isnan(x):
        raise ValueError("x must not be NaN")
    return 0.5 * math.erfc(-x / _SQRT2)


def log_expm1(v: float) -> float:
    """log(exp(v) - 1), valid for any v > 0 without overflow."""
    if not v > 0:
        raise ValueError(f"need v > 0, got {v}")
    if v > 690.0:
        return v + math.log1p(-math.exp(-v))
    return math.log(math.expm1(v))


def _check_inputs(mus, sigma2: float) -> np.ndarray:
    mus = np.asarray(mus, dtype=float)
    if mus.ndim != 1 or mus.size == 0:
        raise ValueError("mus must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(mus)):
        raise ValueError("mus must be finite")
    if not (math.isfinite(sigma2) and sigma2 > 0):
        raise ValueError(f"sigma2 must be finite and > 0, got {sigma2}")
    return mus


def fw_approx(mus, sigma2: float) -> LognormalSumApprox:
    """Fit one lognormal to sum_i exp(N(mu_i, sigma2)) by moment matching.

    sigma2_y = log[(e^{sigma2} - 1) * sum e^{2 mu_i} / (sum e^{mu_i})^2 + 1]
    mu_y     = log sum e^{mu_i} + sigma2 / 2 - sigma2_y / 2
    """
    mus = _check_inputs(mus, sigma2)
    lse1 = float(logsumexp(mus))
    lse2 = float(logsumexp(2.0 * mus))
    # log of (e^{sigma2}-1) * exp(lse2 - 2*lse1); the ratio term is <= 1 in
    # magnitude drift but either factor alone can overflow.
    log_inner = log_expm1(sigma2) + lse2 - 2.0 * lse1
    sigma2_y = float(np.logaddexp(0.0, log_inner))
    mu_y = lse1 + 0.5 * sigma2 - 0.5 * sigma2_y
    return LognormalSumApprox(mu_y=mu_y, sigma2_y=sigma2_y)


def mc_sum_cdf(mus, sigma2: float, n_draws: int, seed: int) -> np.ndarray:
    """Sorted Monte-Carlo samples of sum_i exp(N(mu_i, sigma2)).

    Returns `n_draws` ascending samples forming the empirical CDF. The sum is
    accumulated over fixed-size dimension blocks, each with its own child seed,
    so the output is bit-reproducible for a given (mus, sigma2, n_draws, seed)
    regardless of how the blocks might be scheduled.
    """
    mus = _check_inputs(mus, sigma2)
    if n_draws < 1000:
        raise ValueError(f"need n_draws >= 1000, got {n_draws}")
    sd = math.sqrt(sigma2)
    total = np.zeros(n_draws)
    n_chunks = (mus.size + _MC_CHUNK - 1) // _MC_CHUNK
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    for k in range(n_chunks):
        block = mus[k * _MC_CHUNK : (k + 1) * _MC_CHUNK]
        rng = np.random.default_rng(children[k])
        z = rng.standard_normal((n_draws, block.size))
        z *= sd
        z += block
        total += np.exp(z, out=z).sum(axis=1)
    total.sort()
    return total


def empirical_cdf_ks(sorted_samples: np.ndarray, cdf) -> float:
    """Kolmogorov-Smirnov distance between an empirical CDF and `cdf`.

    `sorted_samples` must be ascending; `cdf` maps sample values to [0, 1].
    """
    s = np.asarray(sorted_samples, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample")
    n = s.size
    f = np.asarray(cdf(s), dtype=float)
    steps_hi = np.arange(1, n + 1) / n
    steps_lo = np.arange(0, n) / n
    return float(np.max(np.maximum(steps_hi - f, f - steps_lo)))
