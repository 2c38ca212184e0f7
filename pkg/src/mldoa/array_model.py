"""Uniform linear array manifold, scenarios, Gaussian snapshots and sample covariances.

Angles are electrical, ``theta = pi * sin(beta)`` with ``beta`` the physical
angle. Physical degrees are only accepted through :func:`electrical_from_degrees`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_hermitian

DEFAULT_EPS = 0.0262


def electrical_from_degrees(beta_deg) -> np.ndarray:
    return np.pi * np.sin(np.deg2rad(np.asarray(beta_deg, dtype=float)))


def degrees_from_electrical(theta) -> np.ndarray:
    return np.rad2deg(np.arcsin(np.asarray(theta, dtype=float) / np.pi))


def is_feasible(angles, eps: float = DEFAULT_EPS, tol: float = 1e-12) -> bool:
    """Membership in the ordered, eps-separated set inside (-pi, pi)."""
    th = np.asarray(angles, dtype=float)
    if th.ndim != 1 or th.size == 0 or not np.all(np.isfinite(th)):
        return False
    return bool(th[0] >= -np.pi + eps - tol and th[-1] <= np.pi - eps + tol
                and np.all(np.diff(th) >= eps - tol))


@dataclass(frozen=True)
class ThetaPoint:
    """Ordered K-vector of electrical angles inside the feasibility set."""

    angles: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.angles, dtype=float)).copy()
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not is_feasible(th, self.eps):
            raise ValueError(f"theta {th} is not feasible for eps={self.eps}")
        th.setflags(write=False)
        object.__setattr__(self, "angles", th)

    @property
    def k(self) -> int:
        return self.angles.size


def _angles(theta) -> np.ndarray:
    if isinstance(theta, ThetaPoint):
        return theta.angles
    return np.asarray(theta, dtype=float)


@dataclass(frozen=True)
class Manifold:
    element_count: int
    spacing: float = 0.25
    kind: str = "uniform-linear"

    def __post_init__(self):
        if self.kind != "uniform-linear":
            raise ValueError(f"unsupported array kind {self.kind!r}")
        if int(self.element_count) != self.element_count or self.element_count < 2:
            raise ValueError("element_count must be an integer >= 2")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")


def steering_matrix(man: Manifold, theta) -> np.ndarray:
    """Steering vectors ``exp(j 2 d m theta_k)``, element 0 as phase reference.

    ``theta`` may be a ThetaPoint, a K-vector, or a (..., K) batch; the
    result has shape (..., M, K).
    """
    th = _angles(theta)
    m = np.arange(man.element_count, dtype=float)
    phase = 2.0 * man.spacing * m[:, None] * th[..., None, :]
    return np.exp(1j * phase)


def psd_sqrt(a) -> np.ndarray:
    """Hermitian PSD square root via eigendecomposition (works for singular input)."""
    w, v = np.linalg.eigh(as_hermitian(a))
    w = np.clip(w, 0.0, None)
    out = (v * np.sqrt(w)) @ v.conj().T
    return 0.5 * (out + out.conj().T)


@dataclass
class Scenario:
    manifold: Manifold
    true_theta: ThetaPoint
    source_cov: np.ndarray
    noise_power: float
    snapshots: int

    def __post_init__(self):
        k = self.true_theta.k
        ps = np.atleast_2d(np.asarray(self.source_cov, dtype=complex))
        if ps.shape != (k, k):
            raise ValueError(f"source covariance must be {k}x{k}, got {ps.shape}")
        ps = as_hermitian(ps)
        w = np.linalg.eigvalsh(ps)
        if w.min() < -1e-10 * max(np.abs(w).max(), 1.0):
            raise ValueError(f"source covariance is not PSD (min eigenvalue {w.min():.3e})")
        self.source_cov = ps
        if not self.noise_power > 0:
            raise ValueError("noise_power must be positive")
        if int(self.snapshots) != self.snapshots or self.snapshots < 1:
            raise ValueError("snapshots must be a positive integer")
        if k >= self.manifold.element_count:
            raise ValueError("need fewer sources than sensors")
        gram = self.steering.conj().T @ self.steering
        if np.linalg.eigvalsh(gram).min() <= 1e-8 * self.m:
            raise ValueError("steering matrix at the true DoAs is rank deficient")
        self._r = None
        self._r_half = None

    @classmethod
    def equal_power(cls, manifold: Manifold, true_theta: ThetaPoint, snr_db: float,
                    snapshots: int, noise_power: float = 1.0, correlation=None) -> "Scenario":
        """Sources with power ``noise_power * 10^(snr/10)`` each; optional correlation matrix."""
        k = true_theta.k
        p = noise_power * 10.0 ** (snr_db / 10.0)
        corr = np.eye(k) if correlation is None else np.asarray(correlation, dtype=complex)
        return cls(manifold, true_theta, p * corr, noise_power, snapshots)

    @property
    def m(self) -> int:
        return self.manifold.element_count

    @property
    def k(self) -> int:
        return self.true_theta.k

    @property
    def n(self) -> int:
        return int(self.snapshots)

    @property
    def steering(self) -> np.ndarray:
        return steering_matrix(self.manifold, self.true_theta)

    @property
    def covariance(self) -> np.ndarray:
        if self._r is None:
            self._r = build_covariance(self)
        return self._r

    @property
    def covariance_sqrt(self) -> np.ndarray:
        if self._r_half is None:
            self._r_half = psd_sqrt(self.covariance)
        return self._r_half


def build_covariance(sc: Scenario) -> np.ndarray:
    """``R = A P_s A^H + sigma^2 I``."""
    a = sc.steering
    r = a @ sc.source_cov @ a.conj().T + sc.noise_power * np.eye(sc.m)
    return 0.5 * (r + r.conj().T)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex Gaussian entries with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def snapshot_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator for a seed or SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def generate_snapshots(sc: Scenario, seed, trials: int | None = None) -> np.ndarray:
    """``Y = R^{1/2} X`` with i.i.d. circular Gaussian X; shape (M, N) or (trials, M, N)."""
    rng = seed if isinstance(seed, np.random.Generator) else snapshot_rng(seed)
    shape = (sc.m, sc.n) if trials is None else (trials, sc.m, sc.n)
    return sc.covariance_sqrt @ complex_normal(rng, shape)


@dataclass
class SampleCovariance:
    matrix: np.ndarray
    snapshot_count: int
    snapshots: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.matrix.shape[-1]


def sample_covariance(y) -> SampleCovariance:
    """``R_hat = Y Y^H / N``; the snapshots are kept for the undersampled UML form."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError("expected an M x N snapshot matrix")
    n = y.shape[1]
    r = y @ y.conj().T / n
    return SampleCovariance(0.5 * (r + r.conj().T), n, y)


def sample_covariance_batch(y) -> np.ndarray:
    """Stacked ``Y Y^H / N`` for a (T, M, N) batch."""
    r = y @ np.swapaxes(y.conj(), -1, -2) / y.shape[-1]
    return 0.5 * (r + np.swapaxes(r.conj(), -1, -2))
