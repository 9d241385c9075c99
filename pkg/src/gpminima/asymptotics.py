"""Tail asymptotics for the minimum of a smooth Gaussian process.

Given the atomic minimizer of the covariance energy on [a, b] (support S,
Gram matrix Sigma, optimal value V*), the probability that the whole path
stays above a high level u behaves like

    P(min X > u)  ~  E(W) * c / (theta_1 ... theta_k) * u^{-k} * exp(-u^2 / (2 V*)),

with theta = Sigma^{-1} 1, c = (2 pi)^{-k/2} det(Sigma)^{-1/2}, k = |S|, and
W a correction factor built from the residual process Z (the part of X not
explained by the values on S): Gaussian-square exponential factors from the
path curvature at interior atoms, indicator/exponential mixtures at flat
endpoints, and sign indicators at the extra points where the conditional
mean touches its floor.

This module computes every ingredient: the conditional-mean certificate mu
and its derivatives, the essential set where mu = 1, the residual-field
covariance (Schur complement), E(W) (closed form or Monte Carlo), the tail
function itself, and the conditional limit laws (exponential overshoot,
argmin frequencies).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .kernels import Interval, Kernel
from .solver import OptimalSolution

TWO_PI = 2.0 * math.pi

# classification thresholds (relative to the local derivative scale)
DERIV_TOL = 1e-7
MU_TOL = 1e-8
MAX_VANISH_ORDER = 4


class AsymptoticsError(RuntimeError):
    """Inconsistent solution data or unusable residual field."""


@dataclass(frozen=True)
class UpperBoundOnly:
    """Typed marker for the degenerate regime: only a decay bound is known.

    When the certificate curvature vanishes at an interior support point,
    the tail is o(u^{-k} exp(-u^2/(2 V*))) and no leading constant exists.
    """

    k: int
    v_star: float

    def __str__(self) -> str:
        return f"o(u^-{self.k} * exp(-u^2/(2*{self.v_star:.12g})))"


@dataclass
class WEstimate:
    """E(W) value; n = 0 marks an exact closed form (ci_half_width 0)."""

    mean: float
    ci_half_width: float
    n: int


def compute_theta(sigma: np.ndarray) -> np.ndarray:
    """theta = Sigma^{-1} 1 via Cholesky; every component must be positive.

    A nonpositive component contradicts optimality of the support the Gram
    matrix was built on, so it is treated as an error, not a value.
    """
    sigma = np.asarray(sigma, dtype=float)
    try:
        theta = cho_solve(cho_factor(sigma), np.ones(sigma.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise AsymptoticsError("singular support Gram matrix") from exc
    if np.any(theta <= 0):
        raise AsymptoticsError(
            f"theta has nonpositive components {theta}; support is not optimal")
    return theta


class MuFunction:
    """Conditional mean mu(t) = E(X_t | X_s = 1 for all s in S) and derivatives.

    Representation: mu^(j)(t) = theta^T d^j/dt^j R(t, atoms), exact through
    the kernel's derivative tables.  mu(atom) = 1 by construction and
    mu >= 1 on [a, b] for an optimal support.
    """

    def __init__(self, kernel: Kernel, atoms: np.ndarray, sigma: Optional[np.ndarray] = None):
        self.kernel = kernel
        self.atoms = np.asarray(atoms, dtype=float)
        if sigma is None:
            sigma = kernel.cov(self.atoms[:, None], self.atoms[None, :])
        self.sigma = np.asarray(sigma, dtype=float)
        self.theta = compute_theta(self.sigma)

    def __call__(self, t, order: int = 0):
        t = np.asarray(t, dtype=float)
        scalar = t.shape == ()
        tt = np.atleast_1d(t)
        cols = self.kernel.cov_deriv(self.atoms[:, None], tt[None, :], 0, order)
        out = self.theta @ cols
        return float(out[0]) if scalar else out


def mu_eval(mu: MuFunction, t: float, order: int = 0) -> float:
    """mu^(order)(t); thin functional wrapper over MuFunction."""
    return mu(t, order)


@dataclass
class EssentialPoint:
    """One point of the essential set {mu = 1} with its classification."""

    location: float
    kind: str              # "interior-support" | "endpoint-support" | "essential-nonsupport"
    slope: float           # mu'(t)
    mu2: float             # mu''(t)
    vanish_order: Optional[int] = None   # support points: first j >= 1 with mu^(j) != 0
    flagged: bool = False  # vanishing beyond MAX_VANISH_ORDER (suspicious)


@dataclass
class EssentialSet:
    """Essential set E = {t in [a,b] : mu(t) = 1}; support points enumerated first."""

    support: list
    extras: list
    deriv_scales: np.ndarray   # max |mu^(j)| over the scan grid, j = 0..4

    @property
    def points(self) -> list:
        return list(self.support) + list(self.extras)

    @property
    def locations(self) -> np.ndarray:
        return np.array([p.location for p in self.points])

    def interior_support(self) -> list:
        return [p for p in self.support if p.kind == "interior-support"]


def essential_set(mu: MuFunction, interval: Interval, sol: OptimalSolution,
                  scan_n: int = 4001, deriv_tol: float = DERIV_TOL,
                  mu_tol: float = MU_TOL) -> EssentialSet:
    """Locate and classify all points where mu touches 1.

    mu >= 1 everywhere, so touch points are tangential: they are found as
    local minima of mu on a fine scan grid, polished by a bracketed root
    solve on mu', and accepted when mu <= 1 + mu_tol.  Support atoms are
    classified by the first non-vanishing derivative order.
    """
    a, b = interval.a, interval.b
    atoms = sol.measure.atoms
    length = max(b - a, 1e-12)
    grid = np.linspace(a, b, scan_n)
    vals = mu(grid)

    scales = np.array([max(1.0, float(np.max(np.abs(mu(grid, order=j)))))
                       for j in range(MAX_VANISH_ORDER + 1)])

    def vanish_order_of(t: float):
        for j in range(1, MAX_VANISH_ORDER + 1):
            if abs(mu(t, order=j)) > deriv_tol * scales[j]:
                return j, False
        return None, True

    support_pts = []
    for t in atoms:
        endpoint = t == a or t == b
        order, flagged = vanish_order_of(float(t))
        support_pts.append(EssentialPoint(
            location=float(t),
            kind="endpoint-support" if endpoint else "interior-support",
            slope=mu(float(t), 1), mu2=mu(float(t), 2),
            vanish_order=order, flagged=flagged))

    extras = []
    candidates = []
    interior = np.arange(1, scan_n - 1)
    local_min = interior[(vals[interior] <= vals[interior - 1]) &
                         (vals[interior] <= vals[interior + 1])]
    for i in local_min:
        if vals[i] > 1.0 + 100 * mu_tol:
            continue
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, scan_n - 1)]
        slo, shi = mu(lo, 1), mu(hi, 1)
        if slo < 0 < shi:
            t_star = float(brentq(lambda t: mu(t, 1), lo, hi, xtol=1e-14))
        else:
            t_star = float(grid[i])
        candidates.append(t_star)
    for e in (a, b):
        if float(e) not in [p.location for p in support_pts]:
            candidates.append(float(e))

    seen = list(atoms)
    for t_star in sorted(candidates):
        if any(abs(t_star - s) <= 1e-6 * length for s in seen):
            continue
        if mu(t_star) > 1.0 + mu_tol:
            continue
        seen.append(t_star)
        extras.append(EssentialPoint(
            location=t_star, kind="essential-nonsupport",
            slope=mu(t_star, 1), mu2=mu(t_star, 2)))

    return EssentialSet(support=support_pts, extras=extras, deriv_scales=scales)


def nondegeneracy_check(ess: EssentialSet) -> bool:
    """True iff mu'' > 0 at every interior support point.

    This is exactly the condition under which the leading tail constant is
    positive; when it fails only the decay-order bound survives.
    """
    return all(p.vanish_order == 2 for p in ess.interior_support())


@dataclass
class FieldComponent:
    """One coordinate of the residual Gaussian vector entering W."""

    location: float
    order: int        # 1 = residual slope Z', 0 = residual value Z
    kind: str         # "interior" | "endpoint-lower" | "endpoint-upper" | "extra"
    lam: Optional[float] = None  # exp-factor rate theta_j / (2 mu''(t_j)); None = pure indicator


@dataclass
class ResidualField:
    """Centered Gaussian law of the residual components that W depends on."""

    components: list
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.components)

    def w_values(self, samples: np.ndarray) -> np.ndarray:
        """Evaluate the correction factor W on sampled component vectors."""
        samples = np.atleast_2d(samples)
        w = np.ones(samples.shape[0])
        for j, comp in enumerate(self.components):
            v = samples[:, j]
            if comp.kind == "interior":
                w *= np.exp(-comp.lam * v * v)
            elif comp.kind == "endpoint-lower":
                pos = v > 0
                w *= np.where(pos, 1.0,
                              0.0 if comp.lam is None else np.exp(-comp.lam * v * v))
            elif comp.kind == "endpoint-upper":
                neg = v < 0
                w *= np.where(neg, 1.0,
                              0.0 if comp.lam is None else np.exp(-comp.lam * v * v))
            else:  # extra touch point: the path must stay above there
                w *= (v > 0).astype(float)
        return w


def residual_cov(kernel: Kernel, atoms: np.ndarray, sigma: np.ndarray,
                 pts_x, pts_y) -> np.ndarray:
    """Cov(Z^(p)_x, Z^(q)_y) for the residual process Z = X - E(X | X on atoms).

    Schur-complement form: R^{(p,q)}(x, y) - r^{(p)}(x)^T Sigma^{-1} r^{(q)}(y),
    where r^{(p)}(x)_i = d^p/dx^p R(t_i, x).
    """
    atoms = np.asarray(atoms, dtype=float)
    factor = cho_factor(np.asarray(sigma, dtype=float))

    def cross(pts):
        cols = np.empty((atoms.size, len(pts)))
        for j, (x, p) in enumerate(pts):
            cols[:, j] = kernel.cov_deriv(atoms, np.full_like(atoms, x), 0, p)
        return cols

    rx, ry = cross(pts_x), cross(pts_y)
    direct = np.empty((len(pts_x), len(pts_y)))
    for i, (x, p) in enumerate(pts_x):
        for j, (y, q) in enumerate(pts_y):
            direct[i, j] = kernel.cov_deriv(x, y, p, q)
    return direct - rx.T @ cho_solve(factor, ry)


def residual_field(kernel: Kernel, sol: OptimalSolution, ess: EssentialSet,
                   deriv_tol: float = DERIV_TOL) -> ResidualField:
    """Assemble the Gaussian vector W depends on, with its covariance.

    Components: the residual slope Z' at every interior support atom, at an
    endpoint atom only when the certificate is flat there (mu' = 0), and the
    residual value Z at every non-support touch point.
    """
    theta = compute_theta(sol.sigma)
    a, b = sol.interval.a, sol.interval.b
    slope_scale = ess.deriv_scales[1]
    comps = []
    for j, p in enumerate(ess.support):
        lam = None
        if p.vanish_order == 2:
            lam = theta[j] / (2.0 * p.mu2)
        if p.kind == "interior-support":
            if lam is None:
                raise AsymptoticsError(
                    "degenerate interior atom has no exponential factor; "
                    "expected_w is exactly 0")
            comps.append(FieldComponent(p.location, 1, "interior", lam))
        elif abs(p.slope) <= deriv_tol * slope_scale:
            kind = "endpoint-lower" if p.location == a else "endpoint-upper"
            comps.append(FieldComponent(p.location, 1, kind, lam))
    for p in ess.extras:
        comps.append(FieldComponent(p.location, 0, "extra"))

    if not comps:
        return ResidualField(components=[], cov=np.zeros((0, 0)))

    pts = [(c.location, c.order) for c in comps]
    cov = residual_cov(kernel, sol.measure.atoms, sol.sigma, pts, pts)
    cov = 0.5 * (cov + cov.T)
    scale = max(float(np.max(np.diag(cov))), 1.0)
    eig_min = float(np.linalg.eigvalsh(cov)[0])
    if eig_min < -1e-10 * scale:
        raise AsymptoticsError(
            f"residual covariance is indefinite (min eig {eig_min:.3e}); "
            "repair beyond 1e-10 refused")
    if np.any(np.diag(cov) <= 1e-12):
        raise AsymptoticsError("residual component with zero variance; "
                               "support points are linearly dependent")
    if eig_min < 0:
        cov = cov - eig_min * np.eye(cov.shape[0])
    return ResidualField(components=comps, cov=cov)


def _gauss_square_mean(lam: float, var: float) -> float:
    # E exp(-lam G^2) for G ~ N(0, var)
    return 1.0 / math.sqrt(1.0 + 2.0 * lam * var)


def expected_w(field: Optional[ResidualField], theta: np.ndarray, ess: EssentialSet,
               mc_n: int = 10**6, seed: int = 0) -> WEstimate:
    """E(W): exact closed form when possible, otherwise seeded Monte Carlo.

    Degenerate configurations (vanishing curvature at an interior atom)
    return exactly 0 without sampling.  Empty fields return exactly 1.
    Single-component fields use E exp(-lam G^2) = (1 + 2 lam var)^{-1/2} and
    P(G > 0) = 1/2.
    """
    if not nondegeneracy_check(ess):
        return WEstimate(0.0, 0.0, 0)
    if field is None or field.dim == 0:
        return WEstimate(1.0, 0.0, 0)

    if field.dim == 1:
        comp = field.components[0]
        var = float(field.cov[0, 0])
        if comp.kind == "interior":
            return WEstimate(_gauss_square_mean(comp.lam, var), 0.0, 0)
        if comp.kind == "extra":
            return WEstimate(0.5, 0.0, 0)
        # flat endpoint: indicator on one sign, exponential on the other
        exp_part = 0.0 if comp.lam is None else _gauss_square_mean(comp.lam, var)
        return WEstimate(0.5 + 0.5 * exp_part, 0.0, 0)

    if mc_n < 10**4:
        raise ValueError("mc_n below 10^4 gives meaningless confidence intervals")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(field.cov + 1e-14 * np.eye(field.dim))
    total = total_sq = 0.0
    done = 0
    while done < mc_n:
        m = min(1 << 16, mc_n - done)
        w = field.w_values(rng.standard_normal((m, field.dim)) @ chol.T)
        total += float(w.sum())
        total_sq += float((w * w).sum())
        done += m
    mean = total / mc_n
    var = max(total_sq / mc_n - mean * mean, 0.0)
    return WEstimate(mean, 1.96 * math.sqrt(var / mc_n), mc_n)


@dataclass
class AsymptoticReport:
    """Everything needed to evaluate the leading-order tail."""

    theta: np.ndarray
    v_star: float
    c_const: float
    expected_w: WEstimate
    k: int
    nondegenerate: bool
    essential: EssentialSet
    field: Optional[ResidualField]
    sigma: np.ndarray
    interval: Interval

    @property
    def prefactor(self) -> float:
        return self.expected_w.mean * self.c_const / float(np.prod(self.theta))

    def tail(self, u: float):
        """Leading-order P(min X > u); UpperBoundOnly marker when degenerate."""
        if not self.nondegenerate:
            return UpperBoundOnly(k=self.k, v_star=self.v_star)
        if u <= 0:
            raise ValueError("tail asymptotics require u > 0")
        return self.prefactor * u ** (-self.k) * math.exp(-u * u / (2.0 * self.v_star))

    def to_json_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "v_star": self.v_star,
            "c_const": self.c_const,
            "expected_w": {
                "mean": self.expected_w.mean,
                "ci_half_width": self.expected_w.ci_half_width,
                "n": self.expected_w.n,
            },
            "k": self.k,
            "nondegenerate": self.nondegenerate,
            "essential_points": [
                {"location": p.location, "kind": p.kind,
                 "vanish_order": p.vanish_order, "flagged": p.flagged}
                for p in self.essential.points
            ],
            "tail_prefactor": self.prefactor if self.nondegenerate else None,
            "tail_power": self.k,
        }


def tail_probability(report: AsymptoticReport, u: float):
    """Closed-form leading-order tail value at u (see AsymptoticReport.tail)."""
    return report.tail(u)


def finite_dim_tail(theta: np.ndarray, sigma: np.ndarray, u: float,
                    shifts: Optional[np.ndarray] = None) -> float:
    """Leading-order P(X_i > u + h_i / u for all i) for X ~ N(0, Sigma).

    Equals c (theta_1...theta_k)^{-1} exp(-sum theta_i h_i) u^{-k}
    exp(-u^2 sum(theta)/2) with c = (2 pi)^{-k/2} det(Sigma)^{-1/2}.
    """
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    if u <= 0:
        raise ValueError("finite-dimensional tail asymptotics require u > 0")
    shifts = np.zeros(k) if shifts is None else np.asarray(shifts, dtype=float)
    sign, logdet = np.linalg.slogdet(np.asarray(sigma, dtype=float))
    if sign <= 0:
        raise AsymptoticsError("sigma must be positive definite")
    log_c = -0.5 * k * math.log(TWO_PI) - 0.5 * logdet
    log_val = (log_c - float(np.sum(np.log(theta))) - float(theta @ shifts)
               - k * math.log(u) - 0.5 * u * u * float(theta.sum()))
    return math.exp(log_val)


@dataclass
class LimitLaws:
    """Conditional limits given a high path minimum."""

    overshoot_mean: float        # u (min - u) => Exp with this mean
    argmin_weights: np.ndarray   # argmin location => atom t_j with this probability
    finite_min_rates: np.ndarray  # u (X_{t_j} - u) => independent Exp(theta_j)


def limit_laws(report: AsymptoticReport, sol: OptimalSolution) -> LimitLaws:
    theta = report.theta
    return LimitLaws(overshoot_mean=report.v_star,
                     argmin_weights=theta / theta.sum(),
                     finite_min_rates=theta.copy())


def analyze(kernel: Kernel, interval: Interval, sol: OptimalSolution,
            mc_n: int = 10**6, seed: int = 0, deriv_tol: float = DERIV_TOL,
            scan_n: int = 4001) -> AsymptoticReport:
    """Full asymptotic report for a converged atomic solution.

    Refuses flat-degenerate solutions (no atomic support, no asymptotics).
    Cross-checks the structural identities sum(theta) V* = 1 and
    theta/sum(theta) = weights before reporting.
    """
    if sol.degenerate_flat:
        raise AsymptoticsError(
            "continuous-support minimizer: tail asymptotics are undefined")
    if not sol.converged or sol.measure is None:
        raise AsymptoticsError("solution did not converge; refusing asymptotics")

    theta = compute_theta(sol.sigma)
    k = sol.measure.size
    if abs(theta.sum() * sol.v_star - 1.0) > 1e-9:
        raise AsymptoticsError("identity sum(theta) * V* = 1 violated; "
                               "solution and Gram matrix are inconsistent")
    if np.max(np.abs(theta / theta.sum() - sol.measure.weights)) > 1e-8:
        raise AsymptoticsError("theta-normalized weights disagree with the measure")

    mu = MuFunction(kernel, sol.measure.atoms, sol.sigma)
    ess = essential_set(mu, interval, sol, scan_n=scan_n, deriv_tol=deriv_tol)
    nondeg = nondegeneracy_check(ess)

    field = None
    if nondeg:
        field = residual_field(kernel, sol, ess, deriv_tol=deriv_tol)
        w_est = expected_w(field, theta, ess, mc_n=mc_n, seed=seed)
    else:
        w_est = WEstimate(0.0, 0.0, 0)

    sign, logdet = np.linalg.slogdet(sol.sigma)
    if sign <= 0:
        raise AsymptoticsError("support Gram matrix is not positive definite")
    c_const = math.exp(-0.5 * k * math.log(TWO_PI) - 0.5 * logdet)

    return AsymptoticReport(theta=theta, v_star=sol.v_star, c_const=c_const,
                            expected_w=w_est, k=k, nondegenerate=nondeg,
                            essential=ess, field=field, sigma=sol.sigma,
                            interval=interval)
