"""Asymptotic covariances of the cost-function vector over a family of points.

Index 0 of every family is the true DoA vector; the remaining L points are
the extra local minima. ``M (eta_hat - eta_bar)`` over the family is
asymptotically Gaussian with covariance ``Gamma_C`` (CML) or ``Gamma_U`` (UML).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .array_model import DEFAULT_EPS, Manifold, is_feasible, psd_sqrt, steering_matrix
from .det_equiv import (Phi0, Spectrum, log_z_continuous, omega_contour, projected_spectrum,
                        sigma2_bar, solve_phi0, spectrum_from_eigenvalues, z_of_omega)
from .errors import NumericalError
from .ml_costs import Projectors, projectors
from .numerics import as_hermitian

LOG_ARG_FLOOR = 1e-10
# minima on the boundary of the feasible set can pack several sources within a
# few eps, where A^H A is legitimately ill conditioned
FAMILY_RANK_TOL = 1e-14


def q_matrix(r, a, phi0: float, r_half=None) -> np.ndarray:
    """``R^{1/2} A [A^H (R - phi0 I) A]^{-1} A^H R^{1/2}``."""
    r = np.asarray(r)
    a = np.asarray(a)
    rh = psd_sqrt(r) if r_half is None else r_half
    core = a.conj().T @ (r - phi0 * np.eye(r.shape[0])) @ a
    left = rh @ a
    q = left @ np.linalg.solve(core, left.conj().T)
    return 0.5 * (q + q.conj().T)


@dataclass
class PointInfo:
    theta: np.ndarray
    steering: np.ndarray
    proj: Projectors
    spectrum: Spectrum
    phi0: Phi0
    sigma2: float
    p_perp_cal: np.ndarray
    q_cal: np.ndarray


@dataclass
class PointFamily:
    """Candidate points (index 0 = true DoAs) with everything the covariances need."""

    r: np.ndarray
    manifold: Manifold
    points: Sequence
    n: int
    eps: float = DEFAULT_EPS
    check_feasible: bool = True
    info: list = field(init=False, repr=False)

    def __post_init__(self):
        self.r = as_hermitian(np.asarray(self.r, dtype=complex))
        pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in self.points]
        if not pts:
            raise ValueError("a point family needs at least the true DoAs")
        if self.check_feasible:
            for p in pts:
                if not is_feasible(p, self.eps):
                    raise ValueError(f"point {p} is not feasible")
        self.points = pts
        self.r_half = psd_sqrt(self.r)
        self.info = [self._point_info(p) for p in pts]

    def _point_info(self, theta) -> PointInfo:
        a = steering_matrix(self.manifold, theta)
        pr = projectors(a, FAMILY_RANK_TOL)
        spec = projected_spectrum(self.r, pr)
        phi0 = solve_phi0(spec, self.n)
        s2 = sigma2_bar(self.r, pr, self.n)
        if not s2 > 0:
            raise NumericalError(f"sigma^2 at {theta} is not positive")
        pp = self.r_half @ pr.p_a_perp @ self.r_half
        q = q_matrix(self.r, a, phi0.value, self.r_half)
        return PointInfo(theta, a, pr, spec, phi0, s2, 0.5 * (pp + pp.conj().T), q)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def m(self) -> int:
        return self.manifold.element_count

    @property
    def k(self) -> int:
        return self.points[0].size

    def stack(self, attr: str) -> np.ndarray:
        return np.stack([getattr(i, attr) for i in self.info])

    @property
    def sigma2(self) -> np.ndarray:
        return np.array([i.sigma2 for i in self.info])


def _trace_products(a, b) -> np.ndarray:
    """``T[i, j] = tr(a_i b_j)`` for Hermitian stacks."""
    return np.real(np.einsum("iab,jba->ij", a, b))


def _sym(g):
    return 0.5 * (g + g.T)


def gamma_c(pf: PointFamily, r=None) -> np.ndarray:
    pp = pf.stack("p_perp_cal")
    return _sym(_trace_products(pp, pp) / pf.n)


def q_overlap(pf: PointFamily) -> np.ndarray:
    """``(1/N) tr(Q_l Q_m)``."""
    q = pf.stack("q_cal")
    return _sym(_trace_products(q, q) / pf.n)


def _log_argument(pf: PointFamily) -> np.ndarray:
    arg = 1.0 - q_overlap(pf)
    if arg.min() <= LOG_ARG_FLOOR:
        raise NumericalError(f"As5/regime degeneracy: 1 - tr(Q Q)/N = {arg.min():.3e}")
    return arg


def gamma_u_parts(pf: PointFamily) -> tuple[np.ndarray, np.ndarray]:
    """``Gamma_U = G1 + G2`` with G1 a Gram matrix and G2 a Hadamard series in W_Q."""
    pp = pf.stack("p_perp_cal") / pf.sigma2[:, None, None]
    q = pf.stack("q_cal")
    mix = pp + q
    g1 = _sym(_trace_products(mix, mix) / pf.n)
    wq = q_overlap(pf)
    g2 = -wq - np.log(_log_argument(pf))
    return g1, _sym(g2)


def gamma_u(pf: PointFamily, r=None) -> np.ndarray:
    s2 = pf.sigma2
    pp = pf.stack("p_perp_cal")
    q = pf.stack("q_cal")
    gc = _trace_products(pp, pp) / pf.n
    tpq = _trace_products(pp, q) / pf.n  # tpq[a, b] = tr(P_a Q_b)/N
    cross = tpq.T / s2[None, :] + tpq / s2[:, None]
    g = gc / np.outer(s2, s2) + cross - np.log(_log_argument(pf))
    return _sym(g)


def gamma1_closed(pf: PointFamily, ell: int, m: int) -> float:
    """``(1/N) tr(R^{1/2} P_l R^{1/2} Q_m)`` with ``P_0 = I``."""
    if m < 1:
        raise ValueError("m must index a non-true point (m >= 1)")
    rh = pf.r_half
    p_ell = np.eye(pf.m) if ell == 0 else pf.info[ell].proj.p_a
    return float(np.real(np.trace(rh @ p_ell @ rh @ pf.info[m].q_cal)) / pf.n)


def gamma2_closed(pf: PointFamily, ell: int, m: int) -> float:
    """``-log|1 - (1/N) tr(Q_l Q_m)|``."""
    v = 1.0 - float(np.real(np.trace(pf.info[ell].q_cal @ pf.info[m].q_cal))) / pf.n
    if v <= LOG_ARG_FLOOR:
        raise NumericalError(f"As5/regime degeneracy: log argument {v:.3e}")
    return float(-np.log(v))


class GammaMatrices(NamedTuple):
    gamma_c: np.ndarray
    gamma_u: np.ndarray
    diagnostics: dict


def _clamp_psd(g):
    w, v = np.linalg.eigh(g)
    tr = max(np.trace(g), np.finfo(float).tiny)
    if w.min() < 0 and w.min() >= -1e-8 * tr:
        g = _sym((v * np.clip(w, 0, None)) @ v.T)
    return g, float(w.min())


def as5_diagnostics(pf: PointFamily, r=None) -> tuple[float, float]:
    """Minimum eigenvalues of W_P and W_Q over points 1..L."""
    if pf.size < 2:
        raise ValueError("need at least one extra point")
    pp = np.stack([i.proj.p_a_perp for i in pf.info[1:]])
    q = np.stack([i.q_cal for i in pf.info[1:]])
    wp = _sym(_trace_products(pp, pp) / pf.n)
    wq = _sym(_trace_products(q, q) / pf.n)
    return float(np.linalg.eigvalsh(wp).min()), float(np.linalg.eigvalsh(wq).min())


def gamma_matrices(pf: PointFamily) -> GammaMatrices:
    gc, min_c = _clamp_psd(gamma_c(pf))
    gu, min_u = _clamp_psd(gamma_u(pf))
    diag = {"min_eig_gamma_c": min_c, "min_eig_gamma_u": min_u}
    if pf.size >= 2:
        diag["min_eig_wp"], diag["min_eig_wq"] = as5_diagnostics(pf)
    return GammaMatrices(gc, gu, diag)


# double-contour oracle for covariances of spectral functionals

def oracle_factor(pf: PointFamily, ell: int) -> np.ndarray:
    """``A_l = P_A(theta_l) R^{1/2}``; index 0 uses ``R^{1/2}`` itself."""
    return pf.r_half if ell == 0 else pf.info[ell].proj.p_a @ pf.r_half


def _oracle_side(factor, n, node_count, func):
    ra = factor @ factor.conj().T
    g, u = np.linalg.eigh(0.5 * (ra + ra.conj().T))
    g = np.clip(g, 0.0, None)
    spec = spectrum_from_eigenvalues(g)
    oc = omega_contour(spec, n, node_count, orientation="ccw")
    w, dw = oc.contour.nodes()
    z = z_of_omega(spec, n, w)
    if func == "z":
        f = z
    elif func == "log":
        f = log_z_continuous(spec, n, w, oc.roots)
    else:
        raise ValueError(f"unknown function {func!r}")
    d = 1.0 / (g[None, :] - w[:, None])
    return u, d, f * dw


def _oracle_once(a_r, a_m, n, f_r, f_m, node_count, chunk=512):
    u_r, d1, h1 = _oracle_side(a_r, n, node_count, f_r)
    u_m, d2, h2 = _oracle_side(a_m, n, node_count, f_m)
    cross = u_r.conj().T @ a_r @ a_m.conj().T @ u_m
    wmat = np.abs(cross) ** 2 / n
    right = wmat @ d2.T
    right2 = wmat @ (d2 ** 2).T
    total = 0.0j
    # row blocks keep the node-by-node matrices small
    for s in range(0, node_count, chunk):
        b1 = d1[s:s + chunk]
        one_minus = 1.0 - b1 @ right
        worst = np.abs(one_minus).min()
        if worst < 1e-6:
            raise NumericalError(f"|1 - Psi| = {worst:.2e} on the contour grid")
        psi1 = (b1 ** 2) @ right
        psi2 = b1 @ right2
        psi12 = (b1 ** 2) @ right2
        phi = psi12 / one_minus + psi1 * psi2 / one_minus ** 2
        total += h1[s:s + chunk] @ phi @ h2
    return complex(total / (2j * np.pi) ** 2)


def gamma_numeric_oracle(a_r, a_m, n: int, f_r: str = "z", f_m: str = "z",
                         node_count: int = 256, rtol: float = 1e-10, max_nodes: int = 16384) -> float:
    """Double contour integral for the covariance of two spectral functionals.

    ``a_r``, ``a_m`` are square factors with ``R_r = a_r a_r^H``; ``f_r``, ``f_m``
    are ``"z"`` or ``"log"``. Node count doubles until successive values agree.
    """
    a_r = np.asarray(a_r, dtype=complex)
    a_m = np.asarray(a_m, dtype=complex)
    prev = _oracle_once(a_r, a_m, n, f_r, f_m, node_count)
    while 2 * node_count <= max_nodes:
        node_count *= 2
        cur = _oracle_once(a_r, a_m, n, f_r, f_m, node_count)
        if abs(cur - prev) <= rtol * (1.0 + abs(cur)):
            return float(cur.real)
        prev = cur
    raise NumericalError(f"double contour quadrature did not settle at {max_nodes} nodes")


def gamma_c_oracle(pf: PointFamily, ell: int, m: int, **kw) -> float:
    """``Gamma_C`` entry rebuilt from four (z, z) oracle integrals.

    Every index here, 0 included, is a projected factor ``P_A(theta_l) R^{1/2}``;
    the bare ``R^{1/2}`` carries the identity part of ``P^perp = I - P_A``.
    """
    fac = [pf.r_half] + [pf.info[i].proj.p_a @ pf.r_half for i in (ell, m)]
    c = lambda i, j: gamma_numeric_oracle(fac[i], fac[j], pf.n, "z", "z", **kw)
    return c(0, 0) - c(0, 2) - c(1, 0) + c(1, 2)
