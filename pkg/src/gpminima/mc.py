"""Rare-event Monte Carlo verification of the path-minimum asymptotics.

Estimates P(min_{[a,b]} X > u) by importance sampling and compares the
empirical conditional laws (overshoot, argmin location, fluctuation shape)
against the asymptotic predictions.

The sampler tilts only the k support values X_S: they are drawn from
N(u*1, Sigma) while the residual path Z (independent of X_S) keeps its
original law, and the full path is reassembled as X = M X_S + Z with M the
conditional-mean map.  The likelihood ratio then depends on X_S alone,

    LR = exp(-u theta^T X_S + u^2 / (2 V*)),

which avoids ever inverting the ill-conditioned path Gram matrix.

Sampling is chunked with a fixed chunk size; every chunk derives its own
generator from the master seed, and partial sums are reduced in chunk
order, so results are bit-identical no matter how many workers run the
chunks (the GM_THREADS environment variable caps workers).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .asymptotics import AsymptoticReport, MuFunction, residual_cov
from .kernels import Interval, Kernel
from .orthant import orthant_upper
from .solver import OptimalSolution

CHUNK_SIZE = 32768
_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8)
ARGMIN_WINDOW_SPACINGS = 5.0


class MCError(RuntimeError):
    """Unusable configuration for the Monte Carlo harness."""


def _worker_count() -> int:
    env = os.environ.get("GM_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _chol_with_jitter(mat: np.ndarray):
    """Cholesky factor of a barely-PSD matrix, escalating diagonal jitter.

    Smooth-kernel Gram matrices have eigenvalues below roundoff, so a tiny
    ridge is expected; the residual ||LL^T - G||_max equals the jitter and
    stays far below 1e-8 * ||G||_max.
    """
    scale = float(np.max(np.diag(mat)))
    for jit in _JITTER_LADDER:
        try:
            low = np.linalg.cholesky(mat + jit * scale * np.eye(mat.shape[0]))
            return low, jit * scale
        except np.linalg.LinAlgError:
            continue
    raise MCError("covariance matrix is not factorizable even with jitter 1e-8")


@dataclass
class PathGrid:
    """Simulation grid with the Cholesky factor of its covariance matrix."""

    kernel: Kernel
    interval: Interval
    points: np.ndarray
    gram: np.ndarray
    chol: np.ndarray
    jitter: float
    base_spacing: float


def build_path_grid(kernel: Kernel, interval: Interval, include=(), m: int = 201) -> PathGrid:
    """Uniform m-point grid on [a, b], unioned with the given special points."""
    base = np.linspace(interval.a, interval.b, m)
    pts = np.union1d(base, np.asarray(list(include), dtype=float))
    if pts.size > 1:
        keep = np.concatenate([[True], np.diff(pts) > 1e-12 * max(interval.length, 1.0)])
        pts = pts[keep]
    gram = kernel.cov(pts[:, None], pts[None, :])
    gram = 0.5 * (gram + gram.T)
    low, jitter = _chol_with_jitter(gram)
    spacing = interval.length / (m - 1) if m > 1 else 1.0
    return PathGrid(kernel=kernel, interval=interval, points=pts, gram=gram,
                    chol=low, jitter=jitter, base_spacing=spacing)


def sample_paths(grid: PathGrid, n: int, seed: int) -> np.ndarray:
    """n centered Gaussian paths on the grid, reproducible per seed."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, grid.points.size)) @ grid.chol.T


class _TiltedSampler:
    """Shared machinery: tilted support values + residual path assembly."""

    def __init__(self, grid: PathGrid, sol: OptimalSolution):
        self.grid = grid
        self.sol = sol
        atoms = sol.measure.atoms
        self.k = atoms.size
        self.sigma = sol.sigma
        self.chol_sigma = np.linalg.cholesky(self.sigma)
        self.theta = np.linalg.solve(self.sigma, np.ones(self.k))
        self.v_star = sol.v_star
        pts = grid.points
        cross = grid.kernel.cov(atoms[:, None], pts[None, :])
        self.mean_map = np.linalg.solve(self.sigma, cross).T  # (m, k)
        resid = grid.gram - cross.T @ np.linalg.solve(self.sigma, cross)
        self.chol_resid, self.resid_jitter = _chol_with_jitter(0.5 * (resid + resid.T))
        self.support_idx = np.array([int(np.argmin(np.abs(pts - t))) for t in atoms])
        if np.max(np.abs(pts[self.support_idx] - atoms)) > 1e-9 * max(grid.interval.length, 1.0):
            raise MCError("grid does not contain the support atoms; "
                          "build it with include=atoms")

    def draw(self, rng, size: int, u: float, tilt: bool):
        """Support values, assembled paths and log likelihood-ratios."""
        xi = rng.standard_normal((size, self.k))
        x_s = xi @ self.chol_sigma.T
        if tilt:
            x_s += u
            log_lr = -u * (x_s @ self.theta) + u * u / (2.0 * self.v_star)
        else:
            log_lr = np.zeros(size)
        z = rng.standard_normal((size, self.grid.points.size)) @ self.chol_resid.T
        z[:, self.support_idx] = 0.0  # residual vanishes where we condition
        paths = x_s @ self.mean_map.T + z
        return x_s, paths, log_lr


@dataclass
class OvershootStats:
    mean: float
    ks_exponential: float


@dataclass
class MCReport:
    """Importance-sampling estimate with conditional-law statistics."""

    u: float
    n: int
    p_hat: float
    ci: tuple
    formula_value: float
    ratio: float
    ess: float
    overshoot: OvershootStats
    argmin_freqs: np.ndarray     # per-atom weighted frequency of the leftmost argmin
    off_atom_mass: float
    seed: int
    jitter: float
    support_prob: Optional[float]    # exact P(min over atoms > u), quadrature, k <= 3
    ratio_support: Optional[float]   # p_hat / (E(W) * support_prob)
    n_accepted: int
    warnings: list

    def to_json_dict(self) -> dict:
        return {
            "u": self.u, "n": self.n, "p_hat": self.p_hat,
            "ci": [self.ci[0], self.ci[1]],
            "formula_value": self.formula_value, "ratio": self.ratio,
            "ess": self.ess,
            "overshoot_stats": {"mean": self.overshoot.mean,
                                "ks_exponential": self.overshoot.ks_exponential},
            "argmin_hist": self.argmin_freqs.tolist(),
            "off_atom_mass": self.off_atom_mass,
            "seed": self.seed, "jitter": self.jitter,
            "support_prob": self.support_prob, "ratio_support": self.ratio_support,
            "n_accepted": self.n_accepted, "warnings": list(self.warnings),
        }


def weighted_ks_exponential(values: np.ndarray, weights: np.ndarray, mean: float) -> float:
    """Kolmogorov distance between a weighted sample and Exp(mean)."""
    if values.size == 0:
        return math.nan
    order = np.argsort(values)
    v = values[order]
    w = weights[order]
    cum = np.cumsum(w) / w.sum()
    cdf = 1.0 - np.exp(-np.maximum(v, 0.0) / mean)
    below = np.concatenate([[0.0], cum[:-1]])
    return float(max(np.max(np.abs(cum - cdf)), np.max(np.abs(below - cdf))))


def argmin_frequencies(locations: np.ndarray, weights: np.ndarray,
                       atoms: np.ndarray, radius: float):
    """Weighted frequency of the leftmost argmin landing near each atom."""
    freqs = np.zeros(atoms.size)
    total = weights.sum()
    if total <= 0:
        return freqs, math.nan
    dist = np.abs(locations[:, None] - atoms[None, :])
    nearest = np.argmin(dist, axis=1)
    hit = dist[np.arange(locations.size), nearest] <= radius
    for j in range(atoms.size):
        freqs[j] = weights[(nearest == j) & hit].sum() / total
    return freqs, float(1.0 - freqs.sum())


def _run_chunks(total_n: int, seed: int, worker):
    """Map chunk -> partial result with per-chunk child seeds; ordered reduce."""
    sizes = []
    left = total_n
    while left > 0:
        sizes.append(min(CHUNK_SIZE, left))
        left -= CHUNK_SIZE
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = list(zip(range(len(sizes)), sizes, seeds))
    workers = _worker_count()
    if workers == 1:
        return [worker(size, s) for _, size, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(worker, size, s) for _, size, s in jobs]
        return [f.result() for f in futures]


def is_estimate(grid: PathGrid, sol: OptimalSolution, report: AsymptoticReport,
                u: float, n: int, seed: int) -> MCReport:
    """Importance-sampling estimate of P(min over the grid > u).

    For u <= 0 the tilt is disabled (plain Monte Carlo, LR = 1).  The report
    carries the classical estimate and CI, the effective sample size, the
    ratio against the closed-form tail, the ratio against the exact
    finite-dimensional tail (quadrature, k <= 3), and weighted conditional
    statistics of the accepted paths.
    """
    if not report.nondegenerate:
        raise MCError("degenerate configuration: tail formula undefined, "
                      "nothing to verify")
    sampler = _TiltedSampler(grid, sol)
    tilt = u > 0

    def worker(size, child_seed):
        rng = np.random.default_rng(child_seed)
        _, paths, log_lr = sampler.draw(rng, size, u, tilt)
        mins = paths.min(axis=1)
        acc = mins > u
        w = np.where(acc, np.exp(log_lr), 0.0)
        idx = paths.argmin(axis=1)  # first occurrence = leftmost
        return (float(w.sum()), float((w * w).sum()),
                u * (mins[acc] - u), grid.points[idx[acc]], w[acc])

    parts = _run_chunks(n, seed, worker)
    sum_w = sum(p[0] for p in parts)
    sum_w2 = sum(p[1] for p in parts)
    overshoot_vals = np.concatenate([p[2] for p in parts])
    argmin_locs = np.concatenate([p[3] for p in parts])
    acc_w = np.concatenate([p[4] for p in parts])

    p_hat = sum_w / n
    var = max(sum_w2 / n - p_hat * p_hat, 0.0)
    half = 1.96 * math.sqrt(var / n)
    ess = sum_w * sum_w / sum_w2 if sum_w2 > 0 else 0.0

    warnings = []
    if ess < 100:
        warnings.append(f"effective sample size {ess:.1f} < 100")
    if acc_w.size and acc_w.sum() > 0:
        o_mean = float(np.dot(acc_w, overshoot_vals) / acc_w.sum())
        ks = weighted_ks_exponential(overshoot_vals, acc_w, report.v_star)
        freqs, off = argmin_frequencies(argmin_locs, acc_w, sol.measure.atoms,
                                        ARGMIN_WINDOW_SPACINGS * grid.base_spacing)
    else:
        o_mean, ks = math.nan, math.nan
        freqs, off = np.full(sol.measure.atoms.size, math.nan), math.nan
        warnings.append("no accepted samples")

    if u > 0:
        formula = float(report.tail(u))
        ratio = p_hat / formula
    else:
        formula, ratio = math.nan, math.nan
    support_prob = ratio_support = None
    if u > 0 and sampler.k <= 3:
        support_prob = orthant_upper(sol.sigma, np.full(sampler.k, u))
        denom = report.expected_w.mean * support_prob
        ratio_support = p_hat / denom if denom > 0 else math.nan

    return MCReport(u=u, n=n, p_hat=p_hat, ci=(p_hat - half, p_hat + half),
                    formula_value=formula, ratio=ratio, ess=ess,
                    overshoot=OvershootStats(mean=o_mean, ks_exponential=ks),
                    argmin_freqs=freqs, off_atom_mass=off, seed=seed,
                    jitter=grid.jitter, support_prob=support_prob,
                    ratio_support=ratio_support, n_accepted=int(acc_w.size),
                    warnings=warnings)


@dataclass
class ConditionalEnsemble:
    """Accepted paths summarized: conditional-law samples plus shape curves."""

    grid: np.ndarray
    u: float
    n: int
    n_accepted: int
    ess_accepted: float
    overshoot: np.ndarray        # u (min - u) per accepted path
    argmin_location: np.ndarray  # leftmost grid argmin per accepted path
    weights: np.ndarray          # likelihood-ratio weights (self-normalizable)
    fluct_mean: np.ndarray       # weighted mean of X - u mu over accepted paths
    fluct_stderr: np.ndarray     # pointwise standard error of that mean
    fluct_var: np.ndarray        # weighted pointwise variance
    argmin_freqs: np.ndarray
    off_atom_mass: float
    overshoot_mean: float
    overshoot_ks: float
    warnings: list


def conditional_samples(grid: PathGrid, sol: OptimalSolution, report: AsymptoticReport,
                        u: float, n: int, seed: int) -> ConditionalEnsemble:
    """Weighted conditional ensemble of paths with min > u.

    Exposes the scaled-overshoot sample, the leftmost-argmin locations
    mapped to atoms, and the fluctuation curves X - u mu (weighted mean and
    pointwise variance) for comparison against the reference law of the
    correction-weighted residual process.
    """
    if not report.nondegenerate:
        raise MCError("degenerate configuration refused")
    sampler = _TiltedSampler(grid, sol)
    mu_grid = MuFunction(grid.kernel, sol.measure.atoms, sol.sigma)(grid.points)
    tilt = u > 0

    def worker(size, child_seed):
        rng = np.random.default_rng(child_seed)
        _, paths, log_lr = sampler.draw(rng, size, u, tilt)
        mins = paths.min(axis=1)
        acc = mins > u
        w = np.exp(log_lr[acc])
        fluct = paths[acc] - u * mu_grid
        return (u * (mins[acc] - u), grid.points[paths[acc].argmin(axis=1)], w,
                w @ fluct, w @ (fluct * fluct))

    parts = _run_chunks(n, seed, worker)
    overshoot = np.concatenate([p[0] for p in parts])
    argmin_loc = np.concatenate([p[1] for p in parts])
    weights = np.concatenate([p[2] for p in parts])
    sum_wf = np.sum([p[3] for p in parts], axis=0)
    sum_wf2 = np.sum([p[4] for p in parts], axis=0)

    warnings = []
    total = weights.sum()
    if total <= 0:
        raise MCError("no accepted samples; u too high for this sample budget")
    ess = float(total * total / np.dot(weights, weights))
    if ess < 500:
        warnings.append(f"effective accepted sample size {ess:.1f} < 500")
    fluct_mean = sum_wf / total
    fluct_var = np.maximum(sum_wf2 / total - fluct_mean**2, 0.0)
    fluct_stderr = np.sqrt(fluct_var / max(ess, 1.0))
    freqs, off = argmin_frequencies(argmin_loc, weights, sol.measure.atoms,
                                    ARGMIN_WINDOW_SPACINGS * grid.base_spacing)
    return ConditionalEnsemble(
        grid=grid.points, u=u, n=n, n_accepted=int(weights.size),
        ess_accepted=ess, overshoot=overshoot, argmin_location=argmin_loc,
        weights=weights, fluct_mean=fluct_mean, fluct_stderr=fluct_stderr,
        fluct_var=fluct_var, argmin_freqs=freqs, off_atom_mass=off,
        overshoot_mean=float(np.dot(weights, overshoot) / total),
        overshoot_ks=weighted_ks_exponential(overshoot, weights, report.v_star),
        warnings=warnings)


@dataclass
class QWEnsemble:
    """Correction-weighted residual ensemble: the reference fluctuation law."""

    grid: np.ndarray
    n: int
    w_mean: float
    w_ci_half_width: float
    mean_path: np.ndarray     # weighted mean of Z
    var_path: np.ndarray      # weighted pointwise variance of Z
    component_means: list     # (location, kind, weighted mean of the component)


def qw_reference_sample(grid: PathGrid, sol: OptimalSolution, report: AsymptoticReport,
                        n: int, seed: int) -> QWEnsemble:
    """Sample residual paths Z and weight them by the correction factor W.

    The weighted ensemble is the predicted limit law of the conditional
    fluctuations X - u mu; its weighted mean of W also re-estimates E(W).
    Slope components of W are sampled jointly with the path (exact joint
    covariance), not finite-differenced.
    """
    if not report.nondegenerate:
        raise MCError("degenerate configuration refused")
    field = report.field
    atoms = sol.measure.atoms
    pts = grid.points
    m = pts.size

    slope_comps = [c for c in field.components if c.order == 1]
    value_comps = [c for c in field.components if c.order == 0]
    value_idx = []
    for c in value_comps:
        i = int(np.argmin(np.abs(pts - c.location)))
        if abs(pts[i] - c.location) > 1e-9 * max(grid.interval.length, 1.0):
            raise MCError("grid is missing an essential point; "
                          "build it with include=essential locations")
        value_idx.append(i)

    grid_pts = [(float(t), 0) for t in pts]
    resid_zz = residual_cov(grid.kernel, atoms, sol.sigma, grid_pts, grid_pts)
    blocks = [resid_zz]
    if slope_comps:
        slope_pts = [(c.location, 1) for c in slope_comps]
        zs = residual_cov(grid.kernel, atoms, sol.sigma, grid_pts, slope_pts)
        ss = residual_cov(grid.kernel, atoms, sol.sigma, slope_pts, slope_pts)
        blocks = [np.block([[resid_zz, zs], [zs.T, ss]])]
    full = 0.5 * (blocks[0] + blocks[0].T)
    chol, _ = _chol_with_jitter(full)
    support_idx = np.array([int(np.argmin(np.abs(pts - t))) for t in atoms])

    def worker(size, child_seed):
        rng = np.random.default_rng(child_seed)
        draw = rng.standard_normal((size, full.shape[0])) @ chol.T
        z = draw[:, :m]
        z[:, support_idx] = 0.0
        slopes = draw[:, m:]
        cols = []
        s_i = 0
        v_i = 0
        for c in field.components:
            if c.order == 1:
                cols.append(slopes[:, s_i]); s_i += 1
            else:
                cols.append(z[:, value_idx[v_i]]); v_i += 1
        w = field.w_values(np.column_stack(cols)) if cols else np.ones(size)
        return (float(w.sum()), float((w * w).sum()), w @ z, w @ (z * z),
                np.array([np.dot(w, col) for col in cols]))

    parts = _run_chunks(n, seed, worker)
    sum_w = sum(p[0] for p in parts)
    sum_w2 = sum(p[1] for p in parts)
    sum_wz = np.sum([p[2] for p in parts], axis=0)
    sum_wz2 = np.sum([p[3] for p in parts], axis=0)
    comp_sums = np.sum([p[4] for p in parts], axis=0) if field.components else np.array([])

    w_mean = sum_w / n
    w_var = max(sum_w2 / n - w_mean * w_mean, 0.0)
    mean_path = sum_wz / sum_w
    var_path = np.maximum(sum_wz2 / sum_w - mean_path**2, 0.0)
    comp_means = [(c.location, c.kind, float(comp_sums[i] / sum_w))
                  for i, c in enumerate(field.components)]
    return QWEnsemble(grid=pts, n=n, w_mean=w_mean,
                      w_ci_half_width=1.96 * math.sqrt(w_var / n),
                      mean_path=mean_path, var_path=var_path,
                      component_means=comp_means)
