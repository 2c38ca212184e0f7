"""Monte Carlo harness: empirical resolution probability, empirical MSE and CLT moments.

Trials are grouped in fixed-size blocks. Block ``b`` draws its snapshots from a
Philox stream seeded by ``SeedSequence([seed, b])``, so results do not depend
on the number of worker threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .array_model import (DEFAULT_EPS, Scenario, generate_snapshots, sample_covariance_batch,
                          snapshot_rng, steering_matrix)
from .asy_cov import FAMILY_RANK_TOL, PointFamily
from .det_equiv import eta_bar_cml, eta_bar_uml
from .errors import ConfigError
from .ml_costs import cml_cost_batch, projectors, uml_cost_batch
from .resolution import accelerated_descent, low_discrepancy_starts

BLOCK_SIZE = 256
THREADS_ENV = "MLDOA_THREADS"
WILSON_Z = stats.norm.ppf(0.975)


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


@dataclass
class TrialBatch:
    n_trials: int
    seed: int
    scenario: Scenario
    candidate_points: PointFamily | Sequence
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if int(self.n_trials) != self.n_trials or self.n_trials < 1:
            raise ValueError("n_trials must be a positive integer")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if isinstance(self.candidate_points, PointFamily):
            pts = self.candidate_points.points
        else:
            pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in self.candidate_points]
        if not pts:
            raise ValueError("need at least the true DoAs as candidate point")
        self.points = pts
        projs = [projectors(steering_matrix(self.scenario.manifold, p), FAMILY_RANK_TOL) for p in pts]
        self.u_a = np.stack([p.u_a for p in projs])
        self.p_perp = np.stack([p.p_a_perp for p in projs])

    @property
    def blocks(self) -> list[tuple[int, int]]:
        """``(block index, trials in block)``."""
        full, rest = divmod(int(self.n_trials), self.block_size)
        out = [(b, self.block_size) for b in range(full)]
        if rest:
            out.append((full, rest))
        return out

    def block_rng(self, b: int) -> np.random.Generator:
        return snapshot_rng(np.random.SeedSequence([int(self.seed), int(b)]))

    def snapshots(self, b: int, size: int) -> np.ndarray:
        return generate_snapshots(self.scenario, self.block_rng(b), trials=size)


def _costs_from_rhats(batch: TrialBatch, method: str, rhats) -> np.ndarray:
    if method == "CML":
        return cml_cost_batch(batch.p_perp, rhats)
    if method == "UML":
        return uml_cost_batch(batch.u_a, batch.p_perp, rhats, batch.scenario.n)
    raise ValueError(f"unknown method {method!r}")


def _run_blocks(batch: TrialBatch, fn, threads: int | None):
    threads = default_threads() if threads is None else int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    jobs = batch.blocks
    if threads == 1 or len(jobs) == 1:
        return [fn(b, s) for b, s in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda j: fn(*j), jobs))


def simulate_costs(batch: TrialBatch, method: str, threads: int | None = None) -> np.ndarray:
    """Sampled costs at every candidate point, shape (n_trials, L + 1)."""
    def one(b, size):
        rhats = sample_covariance_batch(batch.snapshots(b, size))
        return _costs_from_rhats(batch, method, rhats)
    return np.concatenate(_run_blocks(batch, one, threads))


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z) -> tuple[float, float]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if successes == 0:
        return 0.0, float(z * z / (trials + z * z))
    if successes == trials:
        return float(trials / (trials + z * z)), 1.0
    p = successes / trials
    den = 1.0 + z * z / trials
    mid = (p + z * z / (2 * trials)) / den
    half = z * np.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / den
    return float(max(0.0, mid - half)), float(min(1.0, mid + half))


def resolution_indicator(costs) -> np.ndarray:
    """True where every extra point has a strictly larger cost than the true DoAs."""
    costs = np.asarray(costs)
    return np.all(costs[:, 1:] > costs[:, :1], axis=1)


def empirical_resolution(batch: TrialBatch, method: str, threads: int | None = None):
    """Fraction of trials with the true DoAs winning, with a Wilson 95% interval."""
    if len(batch.points) < 2:
        raise ValueError("candidate family needs at least one extra point")
    hits = int(resolution_indicator(simulate_costs(batch, method, threads)).sum())
    n = int(batch.n_trials)
    return hits / n, wilson_interval(hits, n)


@dataclass
class CltStats:
    sample_mean: np.ndarray
    sample_cov: np.ndarray
    skewness: np.ndarray
    n_trials: int
    samples: np.ndarray = field(repr=False, default=None)

    @property
    def mean_stderr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sample_cov) / self.n_trials)

    def cov_bootstrap_se(self, n_boot: int = 200, seed: int = 0) -> np.ndarray:
        """Entrywise bootstrap standard error of the sample covariance."""
        rng = np.random.default_rng(seed)
        x = self.samples
        reps = np.empty((n_boot,) + self.sample_cov.shape)
        for i in range(n_boot):
            reps[i] = np.cov(x[rng.integers(0, len(x), len(x))], rowvar=False).reshape(self.sample_cov.shape)
        return reps.std(axis=0, ddof=1)


def deterministic_values(batch: TrialBatch, method: str) -> np.ndarray:
    pf = batch.candidate_points
    if not isinstance(pf, PointFamily):
        sc = batch.scenario
        pf = PointFamily(sc.covariance, sc.manifold, batch.points, sc.n, check_feasible=False)
    if method == "CML":
        return np.array([eta_bar_cml(pf.r, i.proj) for i in pf.info])
    if method == "UML":
        return np.array([eta_bar_uml(pf.r, i.proj, pf.n) for i in pf.info])
    raise ValueError(f"unknown method {method!r}")


def clt_stats(batch: TrialBatch, method: str, threads: int | None = None) -> CltStats:
    """Moments of ``M (eta_hat - eta_bar)`` over the candidate points."""
    etabar = deterministic_values(batch, method)
    z = batch.scenario.m * (simulate_costs(batch, method, threads) - etabar)
    cov = np.atleast_2d(np.cov(z, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    return CltStats(z.mean(axis=0), cov, stats.skew(z, axis=0), int(batch.n_trials), z)


# estimator search on sampled costs

def sampled_cost(method: str, manifold, rhat, n: int):
    """Vectorised cost ``thetas (B, K) -> (B,)`` for one sample covariance."""
    rhat = np.asarray(rhat)[None]
    m = rhat.shape[-1]

    def cost(thetas):
        a = steering_matrix(manifold, np.atleast_2d(thetas))
        w, _, vh = np.linalg.svd(a, full_matrices=False)
        p_perp = np.eye(m) - w @ np.swapaxes(w.conj(), -1, -2)
        if method == "CML":
            return cml_cost_batch(p_perp, rhat)[0]
        return uml_cost_batch(w @ vh, p_perp, rhat, n)[0]
    if method not in ("CML", "UML"):
        raise ValueError(f"unknown method {method!r}")
    return cost


@dataclass
class SearchConfig:
    """Starts for the per-trial estimator search: candidate points plus low-discrepancy ones."""
    n_starts: int = 32
    eps: float = DEFAULT_EPS
    max_iter: int = 500
    tol: float = 1e-7
    seed: int = 0


@dataclass
class MseResult:
    mse: float
    n_trials: int
    n_failed: int
    errors: np.ndarray = field(repr=False, default=None)

    @property
    def fail_fraction(self) -> float:
        return self.n_failed / self.n_trials


def row_costs(method: str, manifold, rhats, n: int, owner):
    """Row-aware cost ``(thetas (B, K), rows (B,)) -> (B,)``; row r uses ``rhats[owner[r]]``.

    Singular arguments give NaN instead of raising so one bad trial cannot
    sink a whole block.
    """
    if method not in ("CML", "UML"):
        raise ValueError(f"unknown method {method!r}")
    rhats = np.asarray(rhats)
    owner = np.asarray(owner)
    m = rhats.shape[-1]
    trace = np.real(np.einsum("tii->t", rhats))

    def finite_cost(thetas, t):
        w, _, _ = np.linalg.svd(steering_matrix(manifold, thetas), full_matrices=False)
        inner = np.einsum("bik,bij,bjq->bkq", w.conj(), rhats[t], w)
        inner = 0.5 * (inner + np.swapaxes(inner.conj(), -1, -2))
        cml = (trace[t] - np.real(np.einsum("bkk->b", inner))) / m
        if method == "CML":
            return cml
        k = w.shape[-1]
        kt = min(k, n)
        alpha = np.linalg.eigvalsh(inner)[:, k - kt:]
        s2 = cml * m / (m - kt)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (m - kt) / m * np.log(s2) + np.sum(np.log(alpha), axis=1) / m
        bad = (alpha.min(axis=1) <= 0) | ~(s2 > 0)
        out[bad] = np.nan
        return out

    def cost(thetas, rows):
        thetas = np.atleast_2d(thetas)
        out = np.full(len(thetas), np.nan)
        ok = np.all(np.isfinite(thetas), axis=1)
        if ok.any():
            out[ok] = finite_cost(thetas[ok], owner[np.asarray(rows)[ok]])
        return out
    return cost


def estimate_doa(cost, starts, cfg: SearchConfig):
    """Best finite end point of the multi-start descent, or None when every start fails."""
    with np.errstate(all="ignore"):
        res = accelerated_descent(cost, starts, cfg.eps, cfg.max_iter, cfg.tol)
    ok = np.isfinite(res.f)
    if not ok.any():
        return None
    i = np.flatnonzero(ok)[np.argmin(res.f[ok])]
    return res.x[i]


def empirical_mse(batch: TrialBatch, method: str, search: SearchConfig | None = None,
                  threads: int | None = None) -> MseResult:
    """Mean of ``||theta_hat - theta_bar||^2`` (summed over sources) across trials.

    All (trial, start) pairs of a block descend together; a trial fails when
    none of its starts ends at a finite cost.
    """
    cfg = SearchConfig() if search is None else search
    sc = batch.scenario
    k = sc.k
    extra = low_discrepancy_starts(k, cfg.eps, cfg.n_starts, cfg.seed) if cfg.n_starts > 0 else np.empty((0, k))
    starts = np.concatenate([np.stack(batch.points), extra])
    n_s = len(starts)
    truth = sc.true_theta.angles

    def one(b, size):
        rhats = sample_covariance_batch(batch.snapshots(b, size))
        owner = np.repeat(np.arange(size), n_s)
        cost = row_costs(method, sc.manifold, rhats, sc.n, owner)
        with np.errstate(all="ignore"):
            res = accelerated_descent(cost, np.tile(starts, (size, 1)), cfg.eps, cfg.max_iter, cfg.tol,
                                      row_aware=True)
        f = np.where(np.isfinite(res.f), res.f, np.inf).reshape(size, n_s)
        best = np.argmin(f, axis=1)
        x = res.x.reshape(size, n_s, k)[np.arange(size), best]
        out = np.sum((x - truth) ** 2, axis=1)
        out[~np.isfinite(f.min(axis=1))] = np.nan
        return out
    err = np.concatenate(_run_blocks(batch, one, threads))
    good = np.isfinite(err)
    failed = int((~good).sum())
    mse = float(np.mean(err[good])) if good.any() else float("nan")
    return MseResult(mse, int(batch.n_trials), failed, err)
