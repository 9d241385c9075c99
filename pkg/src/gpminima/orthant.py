"""Upper-orthant probabilities of small Gaussian vectors by nested quadrature.

Serves as the exact finite-dimensional reference that both the closed-form
tail asymptotics and the importance-sampling estimates are compared
against.  Intended for k <= 3 (cost grows as quad^k); accuracy is limited
only by the adaptive quadrature tolerance, not by cancellation, because the
orthant is integrated directly rather than assembled from CDF differences.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.stats import norm

_TAIL_SDS = 14.0  # integration cutoff past the lower limit, in conditional sds


def orthant_upper(sigma: np.ndarray, lower: np.ndarray, epsrel: float = 1e-10) -> float:
    """P(X_i > lower_i for all i) for X ~ N(0, sigma), by conditioning on X_1.

    Recursive: X_rest | X_1 = x is Gaussian with mean beta*x and a Schur
    complement covariance, so the k-dimensional orthant reduces to a
    one-dimensional adaptive integral over x of a (k-1)-dimensional orthant.
    """
    sigma = np.asarray(sigma, dtype=float)
    lower = np.asarray(lower, dtype=float)
    k = lower.size
    s11 = sigma[0, 0]
    sd1 = math.sqrt(s11)
    if k == 1:
        return float(norm.sf(lower[0] / sd1))
    beta = sigma[1:, 0] / s11
    s_cond = sigma[1:, 1:] - np.outer(beta, sigma[0, 1:])

    def integrand(x):
        return norm.pdf(x / sd1) / sd1 * orthant_upper(s_cond, lower[1:] - beta * x, epsrel)

    val, _ = integrate.quad(integrand, lower[0], lower[0] + _TAIL_SDS * sd1,
                            epsabs=0.0, epsrel=epsrel, limit=200)
    return float(val)
