"""Numerical kernel: Hermitian eigensystems, (pseudo) log-determinants,
bracketed root finding, contour quadrature and Gaussian orthant probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .errors import NumericalError

HERMITIAN_RTOL = 1e-12
DEFAULT_RANK_TOL = 1e-10


def as_hermitian(a, tol: float = HERMITIAN_RTOL) -> np.ndarray:
    """Return ``(a + a^H) / 2`` after checking that ``a`` is Hermitian to ``tol``."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    asym = np.abs(a - a.conj().T).max()
    if asym > tol * scale:
        raise ValueError(f"matrix is not Hermitian (asymmetry {asym:.3e} vs scale {scale:.3e})")
    return 0.5 * (a + a.conj().T)


class EigenSystem(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def herm_eig(a) -> EigenSystem:
    """Eigendecomposition of a Hermitian matrix, eigenvalues ascending.

    Each eigenvector is rotated so that its largest-magnitude entry is real
    and positive, which makes the output reproducible across runs.
    """
    a = as_hermitian(a)
    try:
        # LAPACK ?heev: Householder tridiagonalisation + implicit QL/QR
        w, v = scipy.linalg.eigh(a, driver="ev")
    except np.linalg.LinAlgError as exc:
        norm = np.linalg.norm(a)
        diag = np.real(np.diag(a))
        raise NumericalError(
            f"eigendecomposition did not converge (dim={a.shape[0]}, "
            f"|A|_F={norm:.3e}, diag range=[{diag.min():.3e}, {diag.max():.3e}])"
        ) from exc
    idx = np.argmax(np.abs(v), axis=0)
    pivots = v[idx, np.arange(v.shape[1])]
    phase = pivots / np.abs(pivots)
    return EigenSystem(w, v / phase[None, :])


def log_pseudo_det(a, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """Sum of the logs of the eigenvalues above ``rank_tol * max eigenvalue``."""
    w = np.linalg.eigvalsh(as_hermitian(a))
    top = w.max() if w.size else 0.0
    if top <= 0.0:
        raise NumericalError("zero matrix has no pseudo-determinant")
    if w.min() < -1e-10 * max(top, np.abs(w).max()):
        raise NumericalError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    keep = w > rank_tol * top
    return float(np.sum(np.log(w[keep])))


def find_root_bracketed(f: Callable[[float], float], lo: float, hi: float,
                        tol: float = 1e-14) -> float:
    """Root of a continuous scalar function with a sign change on [lo, hi].

    Brent's method (inverse quadratic interpolation safeguarded by bisection).
    """
    flo, fhi = f(lo), f(hi)
    if not (np.isfinite(flo) and np.isfinite(fhi)):
        raise NumericalError(f"bracket invalid: non-finite endpoint values f({lo})={flo}, f({hi})={fhi}")
    if flo == 0.0:
        return float(lo)
    if fhi == 0.0:
        return float(hi)
    if np.sign(flo) == np.sign(fhi):
        raise NumericalError(f"bracket invalid: f({lo})={flo:.3e} and f({hi})={fhi:.3e} share a sign")
    x = brentq(f, lo, hi, xtol=tol * max(1.0, min(abs(lo), abs(hi))), rtol=4 * np.finfo(float).eps,
               maxiter=500)
    return float(x)


@dataclass
class Contour:
    """Ellipse ``center + a cos t + j b sin t`` sampled at ``node_count`` equispaced ``t``.

    With ``log_origin`` set, the ellipse lives in the log plane and the nodes
    are ``log_origin + exp(ellipse)``. This keeps the contour close to a
    spectrum that spans several orders of magnitude. ``must_enclose`` / ``must_exclude`` are checked at construction so that a
    badly placed contour fails loudly instead of silently picking up (or
    missing) a residue.
    """

    center: complex
    semi_axes: tuple[float, float]
    node_count: int = 1024
    orientation: str = "ccw"
    must_enclose: Sequence[complex] = field(default_factory=tuple)
    must_exclude: Sequence[complex] = field(default_factory=tuple)
    log_origin: float | None = None

    def __post_init__(self):
        a, b = (float(s) for s in self.semi_axes)
        if not (a > 0 and b > 0):
            raise ValueError("semi-axes must be positive")
        self.semi_axes = (a, b)
        if self.node_count < 64 or self.node_count % 2:
            raise ValueError("node_count must be an even integer >= 64")
        if self.orientation not in ("ccw", "cw"):
            raise ValueError("orientation must be 'ccw' or 'cw'")
        margin = 1e-6 * max(a, b)
        for p in self.must_enclose:
            if self.distance_inside(p) < margin:
                raise NumericalError(f"contour does not enclose {p} with the required margin")
        for p in self.must_exclude:
            if -self.distance_inside(p) < margin:
                raise NumericalError(f"contour does not exclude {p} with the required margin")

    @classmethod
    def circle_through(cls, left: float, right: float, **kw) -> "Contour":
        """Circle whose diameter is the real segment [left, right]."""
        r = 0.5 * (right - left)
        return cls(0.5 * (left + right), (r, r), **kw)

    def distance_inside(self, p: complex) -> float:
        """Approximate signed distance to the ellipse, positive inside."""
        a, b = self.semi_axes
        p = complex(p)
        if self.log_origin is not None:
            if p == self.log_origin:
                return -np.inf
            p = np.log(p - self.log_origin)
        d = p - complex(self.center)
        rho = np.hypot(d.real / a, d.imag / b)
        return (1.0 - rho) * min(a, b)

    def nodes(self, n: int | None = None):
        """Nodes and trapezoid weights ``dz`` (orientation sign included)."""
        n = self.node_count if n is None else n
        a, b = self.semi_axes
        t = 2.0 * np.pi * np.arange(n) / n
        z = self.center + a * np.cos(t) + 1j * b * np.sin(t)
        dz = (-a * np.sin(t) + 1j * b * np.cos(t)) * (2.0 * np.pi / n)
        if self.log_origin is not None:
            z = np.exp(z)
            dz = z * dz
            z = self.log_origin + z
        if self.orientation == "cw":
            dz = -dz
        return z, dz


def _eval_checked(integrand, z):
    vals = np.asarray(integrand(z), dtype=complex)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"integrand is not finite at contour node {i} (z={z[i]:.6g})")
    return vals


def contour_integral(c: Contour, integrand: Callable[[np.ndarray], np.ndarray],
                     refine: bool = True, rtol: float = 1e-9, max_nodes: int = 2 ** 18) -> complex:
    """Trapezoid approximation of the closed integral of ``integrand`` along ``c``.

    ``integrand`` is called with an array of nodes. With ``refine`` the node
    count is doubled (reusing the previous evaluations) until two successive
    estimates agree to ``rtol * (1 + |I|)``.
    """
    z, dz = c.nodes()
    terms = _eval_checked(integrand, z) * dz
    total = terms.sum()
    n = c.node_count
    while refine:
        if 2 * n > max_nodes:
            raise NumericalError(f"contour quadrature did not settle below {max_nodes} nodes")
        # odd nodes of the doubled rule
        zz, ddz = c.nodes(2 * n)
        new = (_eval_checked(integrand, zz[1::2]) * ddz[1::2]).sum()
        refined = 0.5 * total + new
        done = abs(refined - total) <= rtol * (1.0 + abs(refined))
        total, n = refined, 2 * n
        if done:
            break
    return complex(total)


@dataclass
class GaussianSpec:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if mu.ndim != 1 or cov.shape != (mu.size, mu.size):
            raise ValueError(f"mean {mu.shape} and covariance {cov.shape} do not match")
        if mu.size:
            scale = max(np.abs(cov).max(), np.finfo(float).tiny)
            if np.abs(cov - cov.T).max() > 1e-12 * scale:
                raise ValueError("covariance is not symmetric")
            cov = 0.5 * (cov + cov.T)
            w, v = np.linalg.eigh(cov)
            if w.min() < -1e-10 * max(np.trace(cov), np.finfo(float).tiny):
                raise ValueError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
            if w.min() < 0:
                cov = (v * np.clip(w, 0, None)) @ v.T
                cov = 0.5 * (cov + cov.T)
        self.mean, self.covariance = mu, cov

    @property
    def dim(self) -> int:
        return self.mean.size


def _ordered_cholesky(cov, lower, tol=1e-12):
    """Cholesky factor with Genz-Bretz variable prioritisation.

    At each step the variable with the smallest conditional probability of
    exceeding its limit (given truncated-mean values for the previous
    variables) is moved forward. Zero pivots produce zero columns, which
    handles rank-deficient covariances.
    """
    n = lower.size
    c = cov.copy()
    a = lower.copy()
    chol = np.zeros((n, n))
    y = np.zeros(n)
    scale = max(np.max(np.diag(c)), np.finfo(float).tiny)
    for i in range(n):
        rest = np.arange(i, n)
        var = np.diag(c)[rest] - np.sum(chol[rest, :i] ** 2, axis=1)
        sd = np.sqrt(np.clip(var, 0, None))
        shift = a[rest] - chol[rest, :i] @ y[:i]
        with np.errstate(divide="ignore", invalid="ignore"):
            prob = np.where(sd > tol * np.sqrt(scale), ndtr(-shift / np.where(sd > 0, sd, 1)),
                            (shift < 0).astype(float))
        j = i + int(np.argmin(prob))
        if j != i:
            c[[i, j], :] = c[[j, i], :]
            c[:, [i, j]] = c[:, [j, i]]
            a[[i, j]] = a[[j, i]]
            chol[[i, j], :] = chol[[j, i], :]
        s2 = c[i, i] - chol[i, :i] @ chol[i, :i]
        if s2 <= (tol ** 2) * scale:
            chol[i, i] = 0.0
            y[i] = 0.0
            continue
        s = np.sqrt(s2)
        chol[i, i] = s
        chol[i + 1:, i] = (c[i + 1:, i] - chol[i + 1:, :i] @ chol[i, :i]) / s
        alpha = (a[i] - chol[i, :i] @ y[:i]) / s
        tail = ndtr(-alpha)
        # mean of a standard normal truncated to (alpha, inf)
        y[i] = np.exp(-0.5 * alpha ** 2) / np.sqrt(2 * np.pi) / tail if tail > 1e-300 else alpha
    return chol, a


def _first_primes(n):
    out, k = [], 2
    while len(out) < n:
        if all(k % p for p in out if p * p <= k):
            out.append(k)
        k += 1
    return np.array(out, dtype=float)


def mvn_orthant(spec: GaussianSpec, n_samples: int = 2 ** 16, seed: int = 0,
                n_shifts: int = 8) -> tuple[float, float]:
    """Estimate ``P[X > 0]`` componentwise for ``X ~ N(mean, covariance)``.

    Genz's sequential conditioning transform evaluated on a randomly shifted
    Richtmyer lattice (``n_shifts`` independent shifts, tent-periodised).
    Returns the estimate and its standard error over the shifts.
    """
    dim = spec.dim
    if dim == 0:
        return 1.0, 0.0
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    chol, a = _ordered_cholesky(spec.covariance, -spec.mean)
    diag = np.diag(chol)
    per_shift = max(n_samples // n_shifts, 1)
    alpha = np.sqrt(_first_primes(max(dim - 1, 1)))
    alpha -= np.floor(alpha)
    k = np.arange(1, per_shift + 1, dtype=float)[:, None]
    estimates = np.empty(n_shifts)
    for s in range(n_shifts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s]))
        x = (k * alpha[None, :] + rng.random(alpha.size)[None, :]) % 1.0
        w = np.abs(2.0 * x - 1.0)
        weight = np.ones(per_shift)
        z = np.zeros((per_shift, dim))
        for i in range(dim):
            t = a[i] - z[:, :i] @ chol[i, :i]
            if diag[i] > 0:
                e = ndtr(-t / diag[i])
                weight *= e
                if i < dim - 1:
                    u = np.clip((1.0 - w[:, i]) * e, 1e-300, 1.0)
                    z[:, i] = -ndtri(u)
            else:
                weight *= t < 0
        estimates[s] = weight.mean()
    p = float(np.clip(estimates.mean(), 0.0, 1.0))
    err = float(estimates.std(ddof=1) / np.sqrt(n_shifts)) if n_shifts > 1 else 0.0
    return p, err
