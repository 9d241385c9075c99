"""Minimizer of the quadratic covariance energy over probability measures.

Solves  min_nu  int int R(s, t) nu(ds) nu(dt)  over probability measures on
[a, b].  For the very smooth kernels in scope the minimizer is a measure
with finitely many atoms, found in three stages:

1. ``solve_grid``      dense simplex QP on a uniform grid (away-step
                       conditional gradient with exact line search),
2. ``extract_atoms``   cluster the grid mass into candidate atoms,
3. ``refine_support``  Newton iteration on the stationarity conditions
                       (certificate slope zero at interior atoms; weights
                       recovered from the Gram row sums).

``verify_kkt`` certifies the result: the certificate function
mu_hat(t) = sum_j beta_j R(t, t_j) / V*  must be >= 1 on [a, b] with
equality on the support.  Kernels whose minimizer is *not* atomic (e.g. a
flat, Lebesgue-like optimum) are detected and flagged rather than solved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .kernels import GaussianKernel, Interval, Kernel, SincKernel, StationaryKernel, gram_matrix


class DegenerateSupportError(RuntimeError):
    """Grid mass does not concentrate on finitely many atoms."""


class RefinementError(RuntimeError):
    """Newton refinement of the support failed to converge."""


class BracketError(RuntimeError):
    """Scalar root solve found no sign change in the search range."""


@dataclass
class AtomicMeasure:
    """Finitely supported probability measure: sorted atoms, positive weights."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.atoms.shape != self.weights.shape or self.atoms.ndim != 1:
            raise ValueError("atoms and weights must be 1-d arrays of equal length")
        if self.atoms.size == 0:
            raise ValueError("measure needs at least one atom")
        if np.any(np.diff(self.atoms) <= 0):
            raise ValueError("atoms must be strictly increasing")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")

    @property
    def size(self) -> int:
        return self.atoms.size


@dataclass
class GridSolution:
    """Dense simplex-QP solution on a uniform grid."""

    grid: np.ndarray
    weights: np.ndarray
    objective: float
    gap: float
    iterations: int
    converged: bool


@dataclass
class KKTCertificate:
    """Certificate data from a fine-grid scan of mu_hat."""

    kkt_min: float
    violations: list
    grid_n: int
    flat_fraction: float


@dataclass
class OptimalSolution:
    """Refined atomic minimizer with its optimality certificate."""

    measure: Optional[AtomicMeasure]
    v_star: float
    sigma: Optional[np.ndarray]
    interval: Interval
    converged: bool
    degenerate_flat: bool = False
    kkt_min: float = math.nan
    kkt_grid_n: int = 0
    newton_residual: float = math.nan
    grid_gap: float = math.nan

    def to_json_dict(self) -> dict:
        return {
            "atoms": [] if self.measure is None else self.measure.atoms.tolist(),
            "weights": [] if self.measure is None else self.measure.weights.tolist(),
            "v_star": self.v_star,
            "kkt_min": None if math.isnan(self.kkt_min) else self.kkt_min,
            "converged": self.converged,
            "degenerate_flat": self.degenerate_flat,
        }


def support_weights(kernel: Kernel, atoms: np.ndarray):
    """Weights, optimal value and Gram matrix for a candidate support.

    With Sigma the Gram matrix on the atoms, theta = Sigma^{-1} 1 yields
    V* = 1 / sum(theta) and weights = theta * V*; these are the unique
    weights making the certificate equal 1 at every atom.
    """
    atoms = np.asarray(atoms, dtype=float)
    gram = gram_matrix(kernel, [(t, 0) for t in atoms])
    sigma = gram.matrix
    theta = np.linalg.solve(sigma, np.ones(len(atoms)))
    ssum = float(theta.sum())
    if ssum <= 0:
        raise RefinementError("nonpositive certificate normalization; support inconsistent")
    v_star = 1.0 / ssum
    return theta * v_star, v_star, sigma, gram


def mu_hat_values(kernel: Kernel, atoms: np.ndarray, weights: np.ndarray,
                  v_star: float, ts, order: int = 0):
    """Certificate mu_hat^(order)(t) = sum_j beta_j d^order R(t, t_j) / V*."""
    ts = np.asarray(ts, dtype=float)
    cols = kernel.cov_deriv(np.asarray(atoms)[:, None], ts[None, :], 0, order)
    return (weights / v_star) @ cols


def solve_grid(kernel: Kernel, interval: Interval, grid_n: int,
               tol: float = 1e-10, max_iter: int = 200_000) -> GridSolution:
    """Simplex-constrained QP  min w^T G w  on a uniform grid.

    Away-step conditional gradient with exact line search; terminates when
    the Frank-Wolfe duality gap drops below ``tol``.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    grid = np.linspace(interval.a, interval.b, grid_n)
    g_mat = kernel.cov(grid[:, None], grid[None, :])
    g_mat = 0.5 * (g_mat + g_mat.T)

    w = np.full(grid_n, 1.0 / grid_n)
    gw = g_mat @ w
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * gw
        gw_dot_w = float(grad @ w)
        i_fw = int(np.argmin(grad))
        gap = gw_dot_w - float(grad[i_fw])
        if gap <= tol:
            break
        active = np.flatnonzero(w > 0)
        i_aw = int(active[np.argmax(grad[active])])
        gap_aw = float(grad[i_aw]) - gw_dot_w

        if gap >= gap_aw:
            # toward vertex i_fw: w' = (1-g) w + g e
            d_gd = float(g_mat[i_fw, i_fw] - 2.0 * gw[i_fw] + w @ gw)
            gamma_max = 1.0
            gamma = gamma_max if d_gd <= 0 else min(gamma_max, gap / (2.0 * d_gd))
            w *= 1.0 - gamma
            w[i_fw] += gamma
            gw = (1.0 - gamma) * gw + gamma * g_mat[:, i_fw]
        else:
            # away from vertex i_aw: w' = (1+g) w - g e
            w_i = w[i_aw]
            if w_i >= 1.0:
                break  # single-vertex iterate; FW gap already minimal
            d_gd = float(w @ gw - 2.0 * gw[i_aw] + g_mat[i_aw, i_aw])
            gamma_max = w_i / (1.0 - w_i)
            gamma = gamma_max if d_gd <= 0 else min(gamma_max, gap_aw / (2.0 * d_gd))
            w *= 1.0 + gamma
            w[i_aw] -= gamma
            if w[i_aw] < 1e-15:
                w[i_aw] = 0.0  # drop step
            gw = (1.0 + gamma) * gw - gamma * g_mat[:, i_aw]

        if it % 512 == 0:
            np.clip(w, 0.0, None, out=w)
            w /= w.sum()
            gw = g_mat @ w

    np.clip(w, 0.0, None, out=w)
    w /= w.sum()
    gw = g_mat @ w
    objective = float(w @ gw)
    grad = 2.0 * gw
    gap = float(grad @ w - grad.min())
    return GridSolution(grid=grid, weights=w, objective=objective, gap=gap,
                        iterations=it, converged=gap <= tol)


def extract_atoms(grid_weights: np.ndarray, grid: np.ndarray,
                  merge_radius: Optional[float] = None, mass_floor: float = 1e-6,
                  max_atoms: int = 12) -> AtomicMeasure:
    """Cluster grid mass into atoms at mass-weighted centroids.

    Raises DegenerateSupportError when the mass pattern is not consistent
    with a small atomic support: more than ``max_atoms`` clusters, mass
    spread over most of the grid, or a cluster far wider than the merge
    radius (all signatures of a continuous minimizer).
    """
    w = np.asarray(grid_weights, dtype=float)
    grid = np.asarray(grid, dtype=float)
    spacing = float(grid[1] - grid[0]) if grid.size > 1 else 1.0
    if merge_radius is None:
        merge_radius = 2.0 * spacing

    above = np.flatnonzero(w > mass_floor)
    if above.size == 0:
        raise DegenerateSupportError("no grid mass above the floor")
    if above.size > 0.5 * grid.size and grid.size > 20:
        raise DegenerateSupportError(
            f"mass spread over {above.size}/{grid.size} grid nodes; "
            "minimizer looks continuous, not atomic")

    clusters = []
    start = prev = above[0]
    for idx in above[1:]:
        if grid[idx] - grid[prev] > merge_radius:
            clusters.append((start, prev))
            start = idx
        prev = idx
    clusters.append((start, prev))

    if len(clusters) > max_atoms:
        raise DegenerateSupportError(
            f"{len(clusters)} mass clusters exceed max_atoms={max_atoms}; "
            "possible continuous minimizer")

    atoms, masses = [], []
    for lo, hi in clusters:
        width = grid[hi] - grid[lo]
        if width > 5.0 * merge_radius:
            raise DegenerateSupportError(
                f"mass cluster of width {width:.3g} is too diffuse for an atom")
        sel = slice(lo, hi + 1)
        mass = w[sel].sum()
        atoms.append(float(np.dot(w[sel], grid[sel]) / mass))
        masses.append(mass)
    atoms = np.asarray(atoms)
    masses = np.asarray(masses)
    return AtomicMeasure(atoms=atoms, weights=masses / masses.sum())


def _snap_and_clean(atoms: np.ndarray, interval: Interval,
                    snap_tol: float = 1e-9, merge_tol: float = 1e-7) -> np.ndarray:
    atoms = np.clip(np.sort(np.asarray(atoms, dtype=float)), interval.a, interval.b)
    atoms[np.abs(atoms - interval.a) < snap_tol] = interval.a
    atoms[np.abs(atoms - interval.b) < snap_tol] = interval.b
    kept = [atoms[0]]
    for t in atoms[1:]:
        if t - kept[-1] > merge_tol:
            kept.append(t)
    return np.asarray(kept)


def refine_support(kernel: Kernel, interval: Interval, initial: AtomicMeasure,
                   newton_tol: float = 1e-12, max_newton: int = 60,
                   max_restarts: int = 10) -> OptimalSolution:
    """Newton-polish a candidate support into the exact atomic minimizer.

    Endpoint atoms stay pinned; interior atom locations solve the
    stationarity system mu_hat'(t_j) = 0 with weights recovered from the
    Gram matrix at every step.  Atoms that escape the interval, collide, or
    come out with nonpositive weight are snapped/merged/deleted and the
    iteration restarts.
    """
    atoms = np.asarray(initial.atoms, dtype=float)
    a, b = interval.a, interval.b
    # grid-stage initials carry endpoint atoms only approximately; pin them
    # up front, otherwise the stationarity system of a stationary kernel is
    # translation-degenerate (the certificate slope is shift-invariant)
    pin_tol = 1e-2 * max(interval.length, 1e-12)

    for _ in range(max_restarts):
        atoms = _snap_and_clean(atoms, interval, snap_tol=pin_tol)
        free = (atoms != a) & (atoms != b)
        residual = 0.0

        if free.any():
            tau = atoms[free]

            def stationarity(tau_vec):
                full = atoms.copy()
                full[free] = tau_vec
                order = np.argsort(full)
                weights, v_star, _, _ = support_weights(kernel, full[order])
                slopes = mu_hat_values(kernel, full[order], weights, v_star,
                                       tau_vec, order=1)
                return slopes

            escaped = False
            res_vec = stationarity(tau)
            for _ in range(max_newton):
                residual = float(np.max(np.abs(res_vec)))
                if residual <= newton_tol:
                    break
                jac = _fd_jacobian(stationarity, tau, res_vec)
                try:
                    step = np.linalg.solve(jac, -res_vec)
                except np.linalg.LinAlgError:
                    step = np.linalg.lstsq(jac, -res_vec, rcond=None)[0]
                limit = 0.25 * max(interval.length, 1e-6)
                biggest = float(np.max(np.abs(step)))
                if not np.isfinite(biggest) or biggest > limit:
                    step = step * (limit / biggest) if np.isfinite(biggest) else \
                        np.full_like(step, -limit)
                lam = 1.0
                while True:
                    tau_new = tau + lam * step
                    if np.any(tau_new < a) or np.any(tau_new > b):
                        if lam > 1.0 / 64:
                            lam *= 0.5
                            continue
                        tau = np.clip(tau_new, a, b)
                        escaped = True
                        break
                    try:
                        res_new = stationarity(tau_new)
                    except (ValueError, np.linalg.LinAlgError):
                        # colliding atoms or singular Gram at the trial point
                        if lam > 1.0 / 64:
                            lam *= 0.5
                            continue
                        tau = tau_new
                        escaped = True
                        break
                    if np.max(np.abs(res_new)) < residual or lam <= 1.0 / 64:
                        tau, res_vec = tau_new, res_new
                        break
                    lam *= 0.5
                if escaped:
                    break
            atoms[free] = tau
            if escaped or np.any(np.abs(atoms[free] - a) < 1e-9) or \
                    np.any(np.abs(atoms[free] - b) < 1e-9):
                continue  # snap to endpoints and restart with them pinned
            residual = float(np.max(np.abs(res_vec)))
            if residual > newton_tol:
                near_edge = (np.abs(atoms[free] - a) < 1e-3 * interval.length) | \
                            (np.abs(atoms[free] - b) < 1e-3 * interval.length)
                if near_edge.any():
                    continue  # snap stragglers to the endpoints and retry
                raise RefinementError(
                    f"Newton stalled at stationarity residual {residual:.3e}")

        atoms = np.sort(atoms)
        weights, v_star, sigma, _ = support_weights(kernel, atoms)
        if np.any(weights <= 0):
            atoms = np.delete(atoms, int(np.argmin(weights)))
            if atoms.size == 0:
                raise RefinementError("all atoms deleted during refinement")
            continue
        measure = AtomicMeasure(atoms=atoms, weights=weights)
        return OptimalSolution(measure=measure, v_star=v_star, sigma=sigma,
                               interval=interval, converged=True,
                               newton_residual=residual)

    raise RefinementError("support refinement did not converge after restarts")


def _fd_jacobian(func, x, f0, h: float = 1e-6):
    n = x.size
    jac = np.empty((f0.size, n))
    for j in range(n):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy(); xp[j] += step
        xm = x.copy(); xm[j] -= step
        jac[:, j] = (func(xp) - func(xm)) / (2.0 * step)
    return jac


def verify_kkt(kernel: Kernel, sol: OptimalSolution, verify_grid_n: int = 4001,
               kkt_tol: float = 1e-8) -> KKTCertificate:
    """Scan the certificate mu_hat on a fine grid.

    Returns its minimum, all grid points where mu_hat < 1 - kkt_tol, and the
    fraction of the grid where mu_hat is within 1e-6 of 1 (a near-flat
    certificate betrays a continuous minimizer).
    """
    measure = sol.measure
    if measure is None:
        raise ValueError("solution has no measure to verify")
    grid = np.union1d(np.linspace(sol.interval.a, sol.interval.b, verify_grid_n),
                      measure.atoms)
    mu = mu_hat_values(kernel, measure.atoms, measure.weights, sol.v_star, grid)
    kkt_min = float(mu.min())
    bad = np.flatnonzero(mu < 1.0 - kkt_tol)
    violations = [(float(grid[i]), float(mu[i])) for i in bad]
    flat_fraction = float(np.mean(np.abs(mu - 1.0) <= 1e-6))
    return KKTCertificate(kkt_min=kkt_min, violations=violations,
                          grid_n=grid.size, flat_fraction=flat_fraction)


# defaults shared by solve() and the command-line front end
DEFAULTS = {
    "grid_n": 401,
    "mass_floor": 1e-6,
    "verify_grid_n": 4001,
    "kkt_tol": 1e-8,
    "max_atoms": 12,
}


def solve(kernel: Kernel, interval: Interval, grid_n: int = 401,
          merge_radius: Optional[float] = None, mass_floor: float = 1e-6,
          verify_grid_n: int = 4001, kkt_tol: float = 1e-8, max_atoms: int = 12,
          exchange_rounds: int = 6) -> OptimalSolution:
    """Full pipeline: grid QP, atom extraction, Newton refinement, certificate.

    If the certificate scan finds mu_hat < 1 somewhere, the offending point
    is added to the support and refinement repeats (a coarse grid can miss
    an atom that carries little mass).  A flat certificate or diffuse grid
    mass yields ``degenerate_flat=True`` instead of a measure.
    """
    if interval.a == interval.b:
        t0 = interval.a
        measure = AtomicMeasure(atoms=np.array([t0]), weights=np.array([1.0]))
        v_star = float(kernel.cov(t0, t0))
        return OptimalSolution(measure=measure, v_star=v_star,
                               sigma=np.array([[v_star]]), interval=interval,
                               converged=True, kkt_min=1.0, kkt_grid_n=1,
                               newton_residual=0.0)

    grid_sol = solve_grid(kernel, interval, grid_n)
    try:
        initial = extract_atoms(grid_sol.weights, grid_sol.grid,
                                merge_radius=merge_radius, mass_floor=mass_floor,
                                max_atoms=max_atoms)
    except DegenerateSupportError:
        return OptimalSolution(measure=None, v_star=grid_sol.objective, sigma=None,
                               interval=interval, converged=False,
                               degenerate_flat=True, grid_gap=grid_sol.gap)

    sol = refine_support(kernel, interval, initial)
    sol.grid_gap = grid_sol.gap
    for _ in range(exchange_rounds):
        cert = verify_kkt(kernel, sol, verify_grid_n, kkt_tol)
        sol.kkt_min = cert.kkt_min
        sol.kkt_grid_n = cert.grid_n
        if cert.flat_fraction > 0.05:
            sol.converged = False
            sol.degenerate_flat = True
            return sol
        if not cert.violations:
            sol.converged = True
            return sol
        worst = min(cert.violations, key=lambda tv: tv[1])[0]
        atoms = np.append(sol.measure.atoms, worst)
        weights = np.append(sol.measure.weights * 0.95, 0.05)
        order = np.argsort(atoms)
        sol = refine_support(kernel, interval,
                             AtomicMeasure(atoms=atoms[order], weights=weights[order]))
        sol.grid_gap = grid_sol.gap
    sol.converged = False
    return sol


def _breakpoint_kernel(family) -> StationaryKernel:
    if isinstance(family, StationaryKernel):
        return family
    if isinstance(family, str):
        table = {"gaussian": GaussianKernel, "sinc": SincKernel}
        if family in table:
            return table[family]()
    raise ValueError(f"unsupported kernel family for breakpoints: {family!r}")


def breakpoint_solve(family, which: str, y_max: float = 60.0) -> float:
    """Regime-transition lengths for a stationary kernel (unit variance).

    ``c1``: largest interval length for which the minimizer keeps exactly two
    atoms; the first positive root of 2 R(y/2) - R(0) - R(y).

    ``c2``: length at which the curvature of the certificate at the interior
    atom of the three-atom solution vanishes; the first root beyond c1 of
    (1 - eps(y)) R''(y/2) - eps(y) lambda_2, where eps(y) is the interior
    weight (R(0) + R(y) - 2 R(y/2)) / (3 R(0) + R(y) - 4 R(y/2)).
    """
    kern = _breakpoint_kernel(family)
    r = lambda y, j=0: float(kern._radial(np.asarray(y, dtype=float), j))
    r0 = r(0.0)

    def f1(y):
        return 2.0 * r(y / 2.0) - r0 - r(y)

    if which == "c1":
        return _first_root(f1, 1e-3, y_max, step=0.02)
    if which == "c2":
        c1 = _first_root(f1, 1e-3, y_max, step=0.02)
        lam2 = kern.second_spectral_moment()

        def f2(y):
            q, p = r(y / 2.0), r(y)
            eps = (r0 + p - 2.0 * q) / (3.0 * r0 + p - 4.0 * q)
            return (1.0 - eps) * r(y / 2.0, 2) - eps * lam2

        return _first_root(f2, c1 + 1e-4, y_max, step=0.02)
    raise ValueError(f"unknown breakpoint {which!r}; expected 'c1' or 'c2'")


def _first_root(func, lo: float, hi: float, step: float) -> float:
    y_prev, f_prev = lo, func(lo)
    y = lo + step
    while y <= hi:
        f_cur = func(y)
        if f_prev == 0.0:
            return y_prev
        if f_prev * f_cur < 0:
            return float(brentq(func, y_prev, y, xtol=1e-12, rtol=1e-14))
        y_prev, f_prev = y, f_cur
        y += step
    raise BracketError(f"no sign change in [{lo}, {hi}]")
