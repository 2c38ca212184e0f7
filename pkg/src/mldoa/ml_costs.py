"""Conditional and unconditional ML cost functions.

The CML cost is ``tr(P_A^perp R_hat) / M``. The UML cost is the concentrated
negative log-likelihood divided by M, in its oversampled (N > K) and
undersampled (N < K) forms; the exact profile over (P_s, sigma^2) is
available through :func:`uml_exact_profile`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .array_model import SampleCovariance
from .errors import NumericalError, RegimeError
from .numerics import as_hermitian, log_pseudo_det

OVERSAMPLED = "oversampled"
UNDERSAMPLED = "undersampled"
METHODS = ("CML", "UML")


def regime(k: int, n: int) -> str:
    if k == n:
        raise RegimeError(f"boundary regime unsupported: K = N = {k}")
    return OVERSAMPLED if n > k else UNDERSAMPLED


def _matrix(rhat) -> np.ndarray:
    return rhat.matrix if isinstance(rhat, SampleCovariance) else np.asarray(rhat)


@dataclass(frozen=True)
class Projectors:
    p_a: np.ndarray
    p_a_perp: np.ndarray
    u_a: np.ndarray
    gram_inv_sqrt: np.ndarray

    @property
    def m(self) -> int:
        return self.p_a.shape[0]

    @property
    def k(self) -> int:
        return self.u_a.shape[1]


RANK_TOL = 1e-10


def projectors(a, rank_tol: float = RANK_TOL) -> Projectors:
    """Projectors onto range(A) and its complement.

    ``U_A = A (A^H A)^{-1/2}`` is the polar factor of A, obtained from its SVD
    so that ``(A^H A)^{-1}`` is never formed. A is rejected when the smallest
    eigenvalue of ``A^H A`` is below ``rank_tol * tr(A^H A) / K``.
    """
    a = np.asarray(a, dtype=complex)
    m, k = a.shape
    w, s, vh = np.linalg.svd(a, full_matrices=False)
    if s.min() ** 2 <= rank_tol * np.sum(s ** 2) / k:
        raise NumericalError(f"manifold degenerate at theta (singular values {s})")
    u_a = w @ vh
    p_a = w @ w.conj().T
    p_a = 0.5 * (p_a + p_a.conj().T)
    gis = (vh.conj().T / s) @ vh
    return Projectors(p_a, np.eye(m) - p_a, u_a, 0.5 * (gis + gis.conj().T))


def cml_cost(p: Projectors, rhat) -> float:
    r = _matrix(rhat)
    return float(np.real(np.sum(p.p_a_perp * r.T)) / p.m)


def sigma2_tilde(p: Projectors, rhat, k_tilde: int) -> float:
    if k_tilde >= p.m:
        raise ValueError(f"k_tilde={k_tilde} must be smaller than M={p.m}")
    return cml_cost(p, rhat) * p.m / (p.m - k_tilde)


def _logdet_pd(a, what: str) -> float:
    w = np.linalg.eigvalsh(as_hermitian(a))
    if w.min() <= 1e-12 * w.max():
        raise NumericalError(f"{what} is singular (eigenvalues {w.min():.3e} .. {w.max():.3e}, "
                             f"condition {w.max() / max(w.min(), 1e-300):.3e})")
    return float(np.sum(np.log(w)))


@dataclass(frozen=True)
class CostEvaluation:
    method: str
    regime: str
    value: float
    theta: object = None
    assumption_ok: bool = True


def uml_cost(p: Projectors, rhat, y=None, n: int | None = None, theta=None) -> CostEvaluation:
    """Concentrated UML cost divided by M.

    Oversampled: ``logdet[s2 P_perp + P R_hat P] / M`` with ``s2`` the noise
    estimate over M - K dimensions. Undersampled: ``((M-N)/M) log s2_N +
    logdet(Y^H P_A Y / N) / M``; without Y the equivalent pseudo-determinant
    of ``P_A R_hat P_A`` is used. ``assumption_ok`` is False when the
    smallest retained signal eigenvalue does not exceed the noise estimate.
    """
    r = _matrix(rhat)
    if n is None:
        if not isinstance(rhat, SampleCovariance):
            raise ValueError("snapshot count n is required with a bare matrix")
        n = rhat.snapshot_count
    if y is None and isinstance(rhat, SampleCovariance):
        y = rhat.snapshots
    m, k = p.m, p.k
    reg = regime(k, n)
    alpha = np.linalg.eigvalsh(as_hermitian(p.u_a.conj().T @ r @ p.u_a))
    if reg == OVERSAMPLED:
        s2 = sigma2_tilde(p, r, k)
        arg = s2 * p.p_a_perp + p.p_a @ r @ p.p_a
        value = _logdet_pd(arg, "UML argument matrix") / m
        ok = bool(alpha[0] > s2)
    else:
        s2 = sigma2_tilde(p, r, n)
        if y is not None:
            y = np.asarray(y)
            if y.shape != (m, n):
                raise ValueError(f"snapshots must be {m}x{n}")
            gram = y.conj().T @ p.p_a @ y / n
            ld = _logdet_pd(gram, "Y^H P_A Y / N")
        else:
            ld = log_pseudo_det(p.p_a @ r @ p.p_a)
        value = (m - n) / m * np.log(s2) + ld / m
        ok = bool(alpha[k - n] > s2)
    return CostEvaluation("UML", reg, float(value), theta, ok)


def uml_cost_eigen_form(p: Projectors, rhat, n: int) -> float:
    """``((M-K~)/M) log s2 + (1/M) log pdet(U_A^H R_hat U_A)`` with ``K~ = min(K, N)``."""
    r = _matrix(rhat)
    m, k = p.m, p.k
    kt = min(k, n)
    alpha = np.linalg.eigvalsh(as_hermitian(p.u_a.conj().T @ r @ p.u_a))
    return float((m - kt) / m * np.log(sigma2_tilde(p, r, kt)) + np.sum(np.log(alpha[k - kt:])) / m)


PROFILE_RTOL = 1e-12


class UmlProfile(NamedTuple):
    m_star: int
    sigma2_hat: float
    p_s_hat: np.ndarray
    neg_loglik: float


def uml_profile_candidates(p: Projectors, rhat):
    """Eigenvalues (descending), sigma^2_k for k = 0..K and the admissibility mask."""
    r = _matrix(rhat)
    m, k = p.m, p.k
    alpha, q = np.linalg.eigh(as_hermitian(p.u_a.conj().T @ r @ p.u_a))
    alpha, q = alpha[::-1], q[:, ::-1]
    tr = float(np.real(np.trace(r)))
    s2 = (tr - np.concatenate([[0.0], np.cumsum(alpha)])) / (m - np.arange(k + 1))
    # ties within round-off count as not exceeding the noise level
    admissible = np.array([True] + [bool(alpha[j - 1] > s2[j] * (1 + PROFILE_RTOL)) for j in range(1, k + 1)])
    return alpha, q, s2, admissible


def profile_neg_loglik(alpha, s2, m_dim: int, j: int) -> float:
    return float((m_dim - j) * np.log(s2[j]) + np.sum(np.log(alpha[:j])) + m_dim)


def uml_exact_profile(p: Projectors, rhat) -> UmlProfile:
    """Exact minimiser of the UML negative log-likelihood over P_s >= 0 and sigma^2 > 0."""
    alpha, q, s2, admissible = uml_profile_candidates(p, rhat)
    m_star = int(np.flatnonzero(admissible).max())
    if m_star == 0:
        return UmlProfile(0, float(s2[0]), np.zeros((p.k, p.k), complex),
                          profile_neg_loglik(alpha, s2, p.m, 0))
    qm = q[:, :m_star]
    core = (qm * (alpha[:m_star] - s2[m_star])) @ qm.conj().T
    ps = p.gram_inv_sqrt @ core @ p.gram_inv_sqrt
    return UmlProfile(m_star, float(s2[m_star]), 0.5 * (ps + ps.conj().T),
                      profile_neg_loglik(alpha, s2, p.m, m_star))


# batched evaluation over many sample covariances at fixed projectors

def cml_cost_batch(p_perp, rhats) -> np.ndarray:
    """``tr(P_perp R_hat)/M`` for P_perp of shape (L, M, M) and R_hat of shape (T, M, M) -> (T, L)."""
    m = rhats.shape[-1]
    return np.real(np.einsum("lij,tji->tl", p_perp, rhats)) / m


def uml_cost_batch(u_a, p_perp, rhats, n: int) -> np.ndarray:
    """UML cost for U_A of shape (L, M, K) and R_hat of shape (T, M, M) -> (T, L)."""
    m, k = u_a.shape[-2], u_a.shape[-1]
    kt = min(k, n)
    cml = cml_cost_batch(p_perp, rhats)
    s2 = cml * m / (m - kt)
    inner = np.einsum("lik,tij,ljq->tlkq", u_a.conj(), rhats, u_a)
    inner = 0.5 * (inner + np.swapaxes(inner.conj(), -1, -2))
    if kt == k:
        sign, ld = np.linalg.slogdet(inner)
        if np.any(sign.real <= 0):
            raise NumericalError("U_A^H R_hat U_A is not positive definite")
    else:
        alpha = np.linalg.eigvalsh(inner)
        ld = np.sum(np.log(alpha[..., k - kt:]), axis=-1)
    return (m - kt) / m * np.log(s2) + ld / m
