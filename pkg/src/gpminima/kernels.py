"""Covariance kernels of very smooth Gaussian processes.

Every kernel here evaluates the covariance R(s, t) = E[X_s X_t] together
with its mixed partial derivatives

    cov_deriv(s, t, m, n) = d^{m+n} R / ds^m dt^n = Cov(X^(m)_s, X^(n)_t)

exactly (closed-form derivative tables, no finite differencing), because the
downstream Newton refinement and residual-field covariances need smooth,
noise-free values.  Orders up to m + n = 4 are guaranteed for all families;
the stationary families support arbitrary order.

Families
--------
GaussianKernel   R(t) = exp(-t^2 / 2)
SincKernel       R(t) = sin(t) / t          (uniform spectral density)
SpectralKernel   finite symmetric spectral measure given as a quadrature
                 rule, R(t) = sum_i w_i cos(t x_i)
CompositeKernel  X_t = Y * g(t) + Z_t - L(Z) with g a polynomial, Z a
                 stationary kernel and L either evaluation at 0 or the
                 integral over [0, 1]; non-stationary.

All evaluation methods broadcast over numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf


class KernelError(ValueError):
    """Invalid kernel input or unsupported operation."""


@dataclass(frozen=True)
class Interval:
    """Compact interval [a, b]."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise KernelError(f"interval endpoints must be finite, got [{self.a}, {self.b}]")
        if self.a > self.b:
            raise KernelError(f"interval requires a <= b, got [{self.a}, {self.b}]")

    @property
    def length(self) -> float:
        return self.b - self.a

    def contains(self, t: float, tol: float = 0.0) -> bool:
        return self.a - tol <= t <= self.b + tol


def _check_finite(*arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise KernelError("non-finite kernel argument")


class Kernel:
    """Base class: a covariance function with exact mixed derivatives."""

    stationary = False

    def cov(self, s, t):
        """Covariance R(s, t); broadcasts over array arguments."""
        return self.cov_deriv(s, t, 0, 0)

    def cov_deriv(self, s, t, m: int, n: int):
        """Mixed partial d^{m+n} R / ds^m dt^n = Cov(X^(m)_s, X^(n)_t)."""
        raise NotImplementedError

    def config(self) -> dict:
        """JSON-serializable description; inverse of kernel_from_config."""
        raise NotImplementedError


class StationaryKernel(Kernel):
    """Kernel with R(s, t) = r(t - s); derivatives reduce to radial ones."""

    stationary = True

    def _radial(self, tau, order: int):
        """order-th derivative r^(order)(tau); broadcasts over tau."""
        raise NotImplementedError

    def cov_deriv(self, s, t, m: int, n: int):
        if m < 0 or n < 0:
            raise KernelError("derivative orders must be nonnegative")
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        _check_finite(s, t)
        # each d/ds pulls out a factor -1 from r(t - s)
        sign = -1.0 if m % 2 else 1.0
        out = sign * self._radial(t - s, m + n)
        return out if out.shape else float(out)

    def second_spectral_moment(self) -> float:
        """lambda_2 = -r''(0) = Var(X'_t), the second moment of the spectral measure."""
        return float(-self._radial(np.asarray(0.0), 2))


class GaussianKernel(StationaryKernel):
    """Stationary kernel r(t) = exp(-t^2/2) (standard Gaussian spectral density)."""

    def _radial(self, tau, order: int):
        tau = np.asarray(tau, dtype=float)
        envelope = np.exp(-0.5 * tau * tau)
        if order == 0:
            return envelope
        # r^(n)(t) = (-1)^n He_n(t) exp(-t^2/2), probabilists' Hermite recurrence
        h_prev = np.ones_like(tau)
        h = tau.copy()
        for k in range(1, order):
            h_prev, h = h, tau * h - k * h_prev
        return (-1.0) ** order * h * envelope

    def config(self) -> dict:
        return {"family": "gaussian"}


class SincKernel(StationaryKernel):
    """Stationary kernel r(t) = sin(t)/t (uniform spectral density on [-1, 1])."""

    _SERIES_CUTOFF = 0.5
    _SERIES_TERMS = 24

    def _radial_series(self, tau, order: int):
        # sin(t)/t = sum_k (-1)^k t^(2k) / (2k+1)!, differentiated termwise;
        # used near 0 where the recurrence form cancels catastrophically
        k0 = (order + 1) // 2
        out = np.zeros_like(tau)
        for k in range(k0, k0 + self._SERIES_TERMS):
            coeff = math.factorial(2 * k) / (
                math.factorial(2 * k - order) * math.factorial(2 * k + 1)
            )
            out += (-1.0) ** k * coeff * tau ** (2 * k - order)
        return out

    def _radial_recurrence(self, tau, order: int):
        # t r(t) = sin(t)  =>  t r^(j) + j r^(j-1) = sin(t + j pi/2)
        r = np.sin(tau) / tau
        for j in range(1, order + 1):
            r = (np.sin(tau + 0.5 * j * np.pi) - j * r) / tau
        return r

    def _radial(self, tau, order: int):
        tau = np.asarray(tau, dtype=float)
        scalar = tau.shape == ()
        tau = np.atleast_1d(tau)
        out = np.empty_like(tau)
        small = np.abs(tau) < self._SERIES_CUTOFF
        if small.any():
            out[small] = self._radial_series(tau[small], order)
        if (~small).any():
            out[~small] = self._radial_recurrence(tau[~small], order)
        return out[0] if scalar else out

    def config(self) -> dict:
        return {"family": "sinc"}


class SpectralKernel(StationaryKernel):
    """Stationary kernel defined by a finite symmetric spectral quadrature rule.

    The rule (nodes x_i, masses w_i >= 0) *defines* the covariance

        r(t) = sum_i w_i cos(t x_i),

    so evaluation is exact by construction.  r(0) = sum_i w_i is the process
    variance; pass weights summing to 1 for a unit-variance process.
    """

    def __init__(self, nodes: Sequence[float], weights: Sequence[float]):
        self.nodes = np.asarray(nodes, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if self.nodes.ndim != 1 or self.nodes.shape != self.weights.shape:
            raise KernelError("spectral nodes and weights must be 1-d arrays of equal length")
        if self.nodes.size == 0:
            raise KernelError("spectral rule must contain at least one node")
        _check_finite(self.nodes, self.weights)
        if np.any(self.weights < 0):
            raise KernelError("spectral masses must be nonnegative")

    def _radial(self, tau, order: int):
        tau = np.asarray(tau, dtype=float)
        phase = np.multiply.outer(tau, self.nodes) + 0.5 * order * np.pi
        coeff = self.weights * self.nodes**order
        return np.cos(phase) @ coeff

    def config(self) -> dict:
        return {
            "family": "spectral",
            "nodes": self.nodes.tolist(),
            "weights": self.weights.tolist(),
        }


class CompositeKernel(Kernel):
    """Non-stationary kernel of the form X_t = Y g(t) + Z_t - L(Z).

    Y is standard normal, independent of the stationary process Z; g is a
    polynomial; L is either pointwise evaluation at 0 (``centering="eval0"``)
    or the path integral over [0, 1] (``centering="integral01"``).  The
    covariance is

        R(s, t) = g(s) g(t) + r(t - s) - c(s) - c(t) + c0,

    with r the covariance of Z and c(t) = Cov(Z_t, L(Z)), c0 = Var(L(Z)).
    """

    _CENTERINGS = ("eval0", "integral01")
    _QUAD_N = 64

    def __init__(self, poly_coeffs: Sequence[float], base: StationaryKernel,
                 centering: str = "eval0"):
        if not isinstance(base, StationaryKernel):
            raise KernelError("composite kernel requires a stationary base kernel")
        if centering not in self._CENTERINGS:
            raise KernelError(f"centering must be one of {self._CENTERINGS}")
        coeffs = np.asarray(poly_coeffs, dtype=float)
        if coeffs.ndim != 1 or coeffs.size == 0:
            raise KernelError("polynomial coefficients must be a nonempty 1-d sequence")
        _check_finite(coeffs)
        self.base = base
        self.centering = centering
        self._poly_coeffs = coeffs
        self._poly_derivs = [np.polynomial.Polynomial(coeffs)]
        for _ in range(8):
            self._poly_derivs.append(self._poly_derivs[-1].deriv())
        if centering == "integral01":
            # fixed Gauss-Legendre rule on [0,1]; exact to machine precision
            # for the analytic radial functions in scope
            x, w = np.polynomial.legendre.leggauss(self._QUAD_N)
            self._quad_x = 0.5 * (x + 1.0)
            self._quad_w = 0.5 * w
            self._c0 = float(self._quad_w @ self._mean_cov(self._quad_x, 0))

    def _poly(self, t, order: int):
        if order >= len(self._poly_derivs):
            return np.zeros_like(np.asarray(t, dtype=float))
        return self._poly_derivs[order](t)

    def _mean_cov(self, t, order: int):
        """order-th derivative of c(t) = Cov(Z_t, L(Z))."""
        t = np.asarray(t, dtype=float)
        if self.centering == "eval0":
            return self.base._radial(t, order)
        if order == 0:
            if isinstance(self.base, GaussianKernel):
                # int_0^1 exp(-(t-v)^2/2) dv via the error function
                s = 1.0 / math.sqrt(2.0)
                return math.sqrt(math.pi / 2.0) * (erf(t * s) - erf((t - 1.0) * s))
            diffs = t[..., None] - self._quad_x
            return self.base._radial(diffs, 0) @ self._quad_w
        # d/dt int_0^1 r(t - v) dv = r^{(order-1)}(t) - r^{(order-1)}(t - 1)
        return self.base._radial(t, order - 1) - self.base._radial(t - 1.0, order - 1)

    def cov_deriv(self, s, t, m: int, n: int):
        if m < 0 or n < 0:
            raise KernelError("derivative orders must be nonnegative")
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        _check_finite(s, t)
        sign = -1.0 if m % 2 else 1.0
        out = self._poly(s, m) * self._poly(t, n) + sign * self.base._radial(t - s, m + n)
        if n == 0:
            out = out - self._mean_cov(s, m)
        if m == 0:
            out = out - self._mean_cov(t, n)
        if m == 0 and n == 0:
            c0 = self._c0 if self.centering == "integral01" else float(self.base._radial(np.asarray(0.0), 0))
            out = out + c0
        out = np.asarray(out)
        return out if out.shape else float(out)

    def second_spectral_moment(self) -> float:
        """Second spectral moment of the stationary base process."""
        return self.base.second_spectral_moment()

    def config(self) -> dict:
        return {
            "family": "composite",
            "poly": self._poly_coeffs.tolist(),
            "base": self.base.config(),
            "centering": self.centering,
        }


# relative floor on the smallest Gram eigenvalue before a degeneracy flag
COND_TOL = 1e-10


@dataclass
class GramResult:
    """Gram matrix of process values/derivatives plus conditioning data."""

    matrix: np.ndarray
    eig_min: float
    eig_max: float
    cond: float
    flagged: bool


def gram_matrix(kernel: Kernel, points: Sequence[tuple[float, int]]) -> GramResult:
    """Covariance matrix of (X^(n_i)_{t_i}) for the given (location, order) pairs.

    Raises on duplicate (location, order) pairs; flags (but still returns)
    matrices whose smallest eigenvalue falls at or below COND_TOL relative to
    the largest, which smooth kernels produce readily.
    """
    pts = [(float(loc), int(order)) for loc, order in points]
    if len(set(pts)) != len(pts):
        raise KernelError("gram points must be pairwise distinct (location, order) pairs")
    k = len(pts)
    g = np.empty((k, k))
    for i, (si, mi) in enumerate(pts):
        for j, (tj, nj) in enumerate(pts):
            if j < i:
                g[i, j] = g[j, i]
            else:
                g[i, j] = kernel.cov_deriv(si, tj, mi, nj)
    eigs = np.linalg.eigvalsh(0.5 * (g + g.T))
    eig_min, eig_max = float(eigs[0]), float(eigs[-1])
    cond = math.inf if eig_min <= 0 else eig_max / eig_min
    flagged = eig_min <= COND_TOL * max(eig_max, np.finfo(float).tiny)
    return GramResult(matrix=g, eig_min=eig_min, eig_max=eig_max, cond=cond, flagged=flagged)


def kernel_from_config(cfg: dict) -> Kernel:
    """Build a kernel from its JSON configuration object.

    Schemas:
        {"family": "gaussian"}
        {"family": "sinc"}
        {"family": "spectral", "nodes": [...], "weights": [...]}
        {"family": "composite", "poly": [c0, c1, ...],
         "base": <stationary kernel config>, "centering": "eval0"|"integral01"}
    """
    if not isinstance(cfg, dict) or "family" not in cfg:
        raise KernelError("kernel config must be an object with a 'family' field")
    family = cfg["family"]
    if family == "gaussian":
        return GaussianKernel()
    if family == "sinc":
        return SincKernel()
    if family == "spectral":
        try:
            return SpectralKernel(cfg["nodes"], cfg["weights"])
        except KeyError as exc:
            raise KernelError(f"spectral kernel config missing field {exc}") from exc
    if family == "composite":
        try:
            base = kernel_from_config(cfg["base"])
            if not isinstance(base, StationaryKernel):
                raise KernelError("composite base must be a stationary kernel")
            return CompositeKernel(cfg["poly"], base, cfg.get("centering", "eval0"))
        except KeyError as exc:
            raise KernelError(f"composite kernel config missing field {exc}") from exc
    raise KernelError(f"unknown kernel family {family!r}")
