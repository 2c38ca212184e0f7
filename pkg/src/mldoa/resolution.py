"""Local minima of the deterministic cost surfaces, predicted resolution probability and MSE.

The resolution event is ``eta_hat(theta_l) > eta_hat(theta_bar)`` for every
extra local minimum ``theta_l``. Its probability is predicted from the
Gaussian limit of ``M (eta_hat - eta_bar)`` over the candidate family.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.stats import qmc

from .array_model import DEFAULT_EPS, Scenario, ThetaPoint
from .asy_cov import GammaMatrices, PointFamily, gamma_matrices
from .det_equiv import deterministic_cost
from .errors import NumericalError
from .numerics import GaussianSpec, mvn_orthant

CLUSTER_THRESHOLD = 0.6
REF_STARTS_K4 = 331
FD_STEP = 1e-5
VERIFY_STEPS = 3000
VERIFY_TOL = 1e-10


def default_start_count(k: int) -> int:
    return int(math.ceil(REF_STARTS_K4 ** (k / 4.0)))


# feasibility projection

def _feasible_bounds(k: int, eps: float):
    if k * eps >= 2 * np.pi - 2 * eps:
        raise ValueError(f"infeasible geometry: K*eps = {k * eps:.4f} >= 2*pi - 2*eps")
    return -np.pi + eps, np.pi - eps - (k - 1) * eps


def pav(y) -> np.ndarray:
    """Least-squares nondecreasing fit by pool-adjacent-violators."""
    y = np.asarray(y, dtype=float)
    means, sizes = [], []
    for v in y:
        means.append(v)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            s = sizes[-2] + sizes[-1]
            means[-2] = (means[-2] * sizes[-2] + means[-1] * sizes[-1]) / s
            sizes[-2] = s
            means.pop()
            sizes.pop()
    return np.repeat(means, sizes)


def _isotonic_rows(u) -> np.ndarray:
    """Row-wise isotonic fit via ``max_{i<=k} min_{j>=k} mean(u[i..j])`` (small K)."""
    b, k = u.shape
    c = np.concatenate([np.zeros((b, 1)), np.cumsum(u, axis=1)], axis=1)
    i = np.arange(k)
    ii, jj = np.meshgrid(i, i, indexing="ij")
    valid = jj >= ii
    mean = (c[:, jj + 1] - c[:, ii]) / np.where(valid, jj - ii + 1, 1)
    out = np.empty_like(u)
    for kk in range(k):
        sub = mean[:, : kk + 1, kk:]
        out[:, kk] = sub.min(axis=2).max(axis=1)
    return out


def project_feasible_batch(x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Euclidean projection of each row onto the ordered eps-separated set."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = x.shape[1]
    lo, hi = _feasible_bounds(k, eps)
    shift = eps * np.arange(k)
    u = _isotonic_rows(x - shift)
    return np.clip(u, lo, hi) + shift


def project_feasible(theta_raw, eps: float = DEFAULT_EPS) -> ThetaPoint:
    """Nearest feasible point: shift by k*eps, isotonic fit (PAV), clip to the box, shift back."""
    x = np.atleast_1d(np.asarray(theta_raw, dtype=float))
    lo, hi = _feasible_bounds(x.size, eps)
    shift = eps * np.arange(x.size)
    return ThetaPoint(np.clip(pav(x - shift), lo, hi) + shift, eps)


# multi-start accelerated projected gradient

def low_discrepancy_starts(k: int, eps: float, count: int, seed: int = 0) -> np.ndarray:
    """Scrambled Halton points mapped uniformly onto the feasibility set."""
    lo, hi = _feasible_bounds(k, eps)
    u = qmc.Halton(d=k, scramble=True, seed=seed).random(count)
    v = np.sort(lo + u * (hi - lo), axis=1)
    return v + eps * np.arange(k)


def fd_gradient(cost, x, h: float = FD_STEP, rows=None) -> np.ndarray:
    """Central differences; ``rows`` tags each point for row-aware costs ``cost(x, rows)``."""
    b, k = x.shape
    e = np.eye(k) * h
    pts = np.concatenate([x[:, None, :] + e[None], x[:, None, :] - e[None]], axis=1).reshape(-1, k)
    f = cost(pts) if rows is None else cost(pts, np.repeat(rows, 2 * k))
    f = f.reshape(b, 2 * k)
    return (f[:, :k] - f[:, k:]) / (2 * h)


@dataclass
class DescentResult:
    x: np.ndarray
    f: np.ndarray
    grad_map_norm: np.ndarray
    iterations: np.ndarray


def accelerated_descent(cost, x0, eps: float = DEFAULT_EPS, max_iter: int = 500, tol: float = 1e-7,
                        step0: float = 0.1, h: float = FD_STEP, row_aware: bool = False) -> DescentResult:
    """Batched FISTA with backtracking and function-value restart.

    With ``row_aware`` the cost is called as ``cost(x, rows)`` where ``rows``
    holds the index of the start each point descends from.
    """
    f = cost if row_aware else (lambda z, rows: cost(z))
    x = project_feasible_batch(x0, eps)
    fx = f(x, np.arange(len(x)))
    y, fy = x.copy(), fx.copy()
    t = np.ones(len(x))
    gnorm = np.full(len(x), np.inf)
    iters = np.zeros(len(x), dtype=int)
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ya, fya = y[idx], fy[idx]
        g = fd_gradient(f, ya, h, idx) if row_aware else fd_gradient(cost, ya, h)
        s = np.full(idx.size, step0)
        xn = project_feasible_batch(ya - s[:, None] * g, eps)
        fn = f(xn, idx)
        for _ in range(60):
            d = xn - ya
            bad = fn > fya + np.sum(g * d, axis=1) + np.sum(d * d, axis=1) / (2 * s) \
                + 1e-13 * np.abs(fya)
            if not bad.any():
                break
            s[bad] *= 0.5
            xn[bad] = project_feasible_batch(ya[bad] - s[bad, None] * g[bad], eps)
            fn[bad] = f(xn[bad], idx[bad])
        gm = np.linalg.norm(ya - xn, axis=1) / s
        worse = fn > fx[idx]
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t[idx] ** 2))
        yn = project_feasible_batch(xn + ((t[idx] - 1) / tn)[:, None] * (xn - x[idx]), eps)
        # restart: drop the step and the momentum
        xn[worse], fn[worse], tn[worse] = x[idx][worse], fx[idx][worse], 1.0
        yn[worse] = xn[worse]
        moved = ~worse
        fyn = fn.copy()
        if moved.any():
            fyn[moved] = f(yn[moved], idx[moved])
        x[idx], fx[idx], y[idx], fy[idx], t[idx] = xn, fn, yn, fyn, tn
        gnorm[idx] = gm
        iters[idx] += 1
        active[idx[(gm <= tol) & ~worse]] = False
    return DescentResult(x, fx, gnorm, iters)


def cluster_minima(points, threshold: float = CLUSTER_THRESHOLD):
    """Single-linkage clusters in the max-coordinate metric, cut below ``threshold``.

    Returns (labels, centroids); labels are 0-based and ordered by first
    appearance.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if len(pts) == 1:
        return np.zeros(1, dtype=int), pts.copy()
    z = linkage(pts, method="single", metric="chebyshev")
    raw = fcluster(z, t=np.nextafter(threshold, 0.0), criterion="distance")
    _, first, labels = np.unique(raw, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    labels = order[labels]
    cents = np.stack([pts[labels == c].mean(axis=0) for c in range(labels.max() + 1)])
    return labels, cents


@dataclass
class LocalMinimaSet:
    points: list
    costs: np.ndarray
    method: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def global_index(self) -> int:
        return int(np.argmin(self.costs))

    def __len__(self):
        return len(self.points)


def find_local_minima(cost: Callable[[np.ndarray], np.ndarray], k: int, eps: float = DEFAULT_EPS,
                      n_starts: int | None = None, seed: int = 0,
                      threshold: float = CLUSTER_THRESHOLD, extra_starts=None,
                      max_iter: int = 500, tol: float = 1e-7, polish_steps: int = 50,
                      verify_steps: int = VERIFY_STEPS, method: str = "") -> LocalMinimaSet:
    """Multi-start projected descent, single-linkage clustering, centroid polishing.

    Polished centroids get a longer verification descent before the final
    clustering: in flat valleys the gradient-map test passes far from any
    minimum, and such stalls would otherwise show up as spurious minima.
    """
    n_starts = default_start_count(k) if n_starts is None else n_starts
    starts = low_discrepancy_starts(k, eps, n_starts, seed) if n_starts > 0 else np.empty((0, k))
    if extra_starts is not None and len(extra_starts):
        starts = np.concatenate([np.atleast_2d(extra_starts), starts])
    res = accelerated_descent(cost, starts, eps, max_iter, tol)
    ok = np.isfinite(res.f)
    converged = ok & (res.grad_map_norm <= tol)
    if not ok.any():
        raise NumericalError("no start produced a finite cost")
    if not converged.any():
        raise NumericalError(f"no start converged (best gradient-map norm {res.grad_map_norm.min():.2e})")
    _, cents = cluster_minima(res.x[ok], threshold)
    pol = accelerated_descent(cost, cents, eps, polish_steps, tol=0.0)
    if verify_steps > 0:
        pol = accelerated_descent(cost, pol.x, eps, verify_steps, tol=VERIFY_TOL)
    # polishing may pull two centroids onto the same basin; keep the best of each group
    labels, _ = cluster_minima(pol.x, threshold)
    keep = [np.flatnonzero(labels == c)[np.argmin(pol.f[labels == c])] for c in range(labels.max() + 1)]
    keep = sorted(keep, key=lambda i: pol.f[i])
    meta = {"starts": int(len(starts)), "converged": int(converged.sum()),
            "clusters": int(len(cents)), "minima": len(keep),
            "max_iterations": int(res.iterations.max())}
    return LocalMinimaSet([pol.x[i] for i in keep], pol.f[keep], method, meta)


def candidate_points(true_theta, minima: LocalMinimaSet, eps: float = DEFAULT_EPS) -> list:
    """True DoAs first, then every minimum farther than 2*eps (max metric) from them."""
    tb = np.asarray(true_theta.angles if isinstance(true_theta, ThetaPoint) else true_theta, float)
    pts = [tb]
    for p in minima.points:
        if np.max(np.abs(p - tb)) > 2 * eps:
            pts.append(np.asarray(p, float))
    return pts


# prediction

def difference_law(etabar, gamma, m_dim: int) -> GaussianSpec:
    """Law of ``eta_hat(theta_l) - eta_hat(theta_bar)``, l = 1..L."""
    etabar = np.asarray(etabar, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    big_l = etabar.size - 1
    d = np.hstack([-np.ones((big_l, 1)), np.eye(big_l)])
    return GaussianSpec(d @ etabar, d @ gamma @ d.T / m_dim ** 2)


def predict_resolution(etabar, gamma, m_dim: int, qmc_budget: int = 2 ** 16,
                       seed: int = 0) -> tuple[float, float]:
    """Gaussian-limit probability that every extra minimum costs more than the true DoAs."""
    if np.asarray(etabar).size < 2:
        return 1.0, 0.0
    return mvn_orthant(difference_law(etabar, gamma, m_dim), qmc_budget, seed)


def mse_large(true_theta) -> float:
    """Expected squared error (summed over sources) of a uniformly random ordered estimate."""
    th = np.asarray(true_theta.angles if isinstance(true_theta, ThetaPoint) else true_theta, float)
    k = th.size
    m = np.arange(1, k + 1)
    return float((2 * np.pi) ** 2 * (k / (6 * (k + 1)) + np.sum((m / (k + 1) - (np.pi + th) / (2 * np.pi)) ** 2)))


def predict_mse(p_res: float, mse_small: float, mse_lg: float) -> float:
    if not 0.0 <= p_res <= 1.0:
        raise ValueError("p_res must lie in [0, 1]")
    if mse_small < 0 or mse_lg < 0:
        raise ValueError("MSE terms must be nonnegative")
    return p_res * mse_small + (1.0 - p_res) * mse_lg


def stochastic_crb(sc: Scenario) -> np.ndarray:
    """Cramer-Rao bound for Gaussian sources, in electrical radians squared."""
    a = sc.steering
    m = np.arange(sc.m)
    d = 1j * 2.0 * sc.manifold.spacing * m[:, None] * a
    r = sc.covariance
    p_perp = np.eye(sc.m) - a @ np.linalg.solve(a.conj().T @ a, a.conj().T)
    ps = sc.source_cov
    inner = ps @ a.conj().T @ np.linalg.solve(r, a) @ ps
    fim = np.real((d.conj().T @ p_perp @ d) * inner.T)
    return sc.noise_power / (2.0 * sc.n) * np.linalg.inv(fim)


def mse_small_crb(sc: Scenario) -> float:
    return float(np.trace(stochastic_crb(sc)))


@dataclass
class ResolutionReport:
    method: str
    snr_db: float
    p_res_predicted: float
    qmc_error: float
    minima: LocalMinimaSet | None = None
    family: PointFamily | None = None
    gamma: GammaMatrices | None = None
    etabar: np.ndarray | None = None
    p_res_empirical: float | None = None
    ci: tuple | None = None
    mse_predicted: float | None = None
    mse_empirical: float | None = None

    @property
    def n_extra(self) -> int:
        return 0 if self.family is None else self.family.size - 1


def analyze(method: str, sc: Scenario, snr_db: float = float("nan"), eps: float = DEFAULT_EPS,
            n_starts: int | None = None, threshold: float = CLUSTER_THRESHOLD, seed: int = 0,
            qmc_budget: int = 2 ** 16, mse_small: float | None = None) -> ResolutionReport:
    """Minima search, covariance build and resolution/MSE prediction for one scenario."""
    cost = deterministic_cost(method, sc.covariance, sc.manifold, sc.n)
    mins = find_local_minima(cost, sc.k, eps, n_starts, seed, threshold,
                             extra_starts=sc.true_theta.angles[None, :], method=method)
    pts = candidate_points(sc.true_theta, mins, eps)
    pf = PointFamily(sc.covariance, sc.manifold, pts, sc.n, eps)
    gm = gamma_matrices(pf)
    etabar = cost(np.stack(pts))
    gamma = gm.gamma_c if method == "CML" else gm.gamma_u
    p, err = predict_resolution(etabar, gamma, sc.m, qmc_budget, seed)
    small = mse_small_crb(sc) if mse_small is None else mse_small
    mse = predict_mse(p, small, mse_large(sc.true_theta))
    return ResolutionReport(method, snr_db, p, err, mins, pf, gm, etabar, mse_predicted=mse)
