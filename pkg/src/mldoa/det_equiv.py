"""Deterministic equivalents of the CML and UML costs and the omega-plane machinery.

For a population matrix with distinct positive eigenvalues ``gamma_m`` of
multiplicity ``K_m`` (K = sum K_m) and N snapshots define

    Phi(w) = (1/N) sum_m K_m gamma_m / (gamma_m - w),   z(w) = w (1 - Phi(w)).

``z`` maps the omega plane onto the plane of the sample-covariance Stieltjes
transform. The smallest root ``phi0`` of ``z`` is 0 when K < N and the unique
negative root of ``Phi = 1`` when K > N. Integrals of ``log z`` against the
deterministic Stieltjes transform have closed forms; the numeric contour
versions here serve as oracles for them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .array_model import Manifold, steering_matrix
from .errors import NumericalError
from .ml_costs import OVERSAMPLED, Projectors, regime
from .numerics import Contour, as_hermitian, contour_integral, find_root_bracketed

CLUSTER_RTOL = 1e-8
ZERO_RTOL = 1e-10


@dataclass(frozen=True)
class Spectrum:
    """Distinct eigenvalues (ascending, 0 allowed) with multiplicities."""

    values: np.ndarray
    multiplicities: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        k = np.asarray(self.multiplicities, dtype=int)
        if v.ndim != 1 or v.shape != k.shape or v.size == 0:
            raise ValueError("values and multiplicities must be matching non-empty vectors")
        if np.any(k < 1) or np.any(v < 0):
            raise ValueError("multiplicities must be positive and values nonnegative")
        if np.any(np.diff(v) <= CLUSTER_RTOL * 0.1 * v.max()):
            raise ValueError("values must be strictly ascending")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "multiplicities", k)

    @property
    def dim(self) -> int:
        return int(self.multiplicities.sum())

    @property
    def gamma(self) -> np.ndarray:
        """Distinct positive eigenvalues."""
        return self.values[self.values > 0]

    @property
    def mult(self) -> np.ndarray:
        return self.multiplicities[self.values > 0]

    @property
    def rank(self) -> int:
        return int(self.mult.sum())


def spectrum_from_eigenvalues(w, cluster_rtol: float = CLUSTER_RTOL,
                              zero_rtol: float = ZERO_RTOL) -> Spectrum:
    """Merge numerically coincident eigenvalues; tiny ones become exact zeros."""
    w = np.sort(np.asarray(w, dtype=float))
    top = np.abs(w).max()
    if top <= 0:
        raise NumericalError("spectrum is identically zero")
    w = np.where(w <= zero_rtol * top, 0.0, w)
    vals, mults = [], []
    for x in w:
        if vals and x - vals[-1][-1] <= cluster_rtol * top:
            vals[-1].append(x)
            mults[-1] += 1
        else:
            vals.append([x])
            mults.append(1)
    values = np.array([0.0 if g[0] == 0.0 else np.mean(g) for g in vals])
    return Spectrum(values, np.array(mults))


def projected_spectrum(r, p: Projectors | None = None) -> Spectrum:
    """Spectrum of ``P_A R P_A``; with ``p=None`` the spectrum of R itself."""
    r = as_hermitian(r)
    if p is None:
        return spectrum_from_eigenvalues(np.linalg.eigvalsh(r))
    inner = as_hermitian(p.u_a.conj().T @ r @ p.u_a)
    alpha = np.linalg.eigvalsh(inner)
    if alpha.min() <= ZERO_RTOL * alpha.max():
        raise NumericalError("As4 violated numerically: fewer than K positive eigenvalues")
    w = np.concatenate([np.zeros(p.m - p.k), alpha])
    spec = spectrum_from_eigenvalues(w)
    if spec.rank != p.k:
        raise NumericalError("As4 violated numerically: fewer than K positive eigenvalues")
    return spec


def phi_function(spec: Spectrum, n: int, w):
    g, k = spec.gamma, spec.mult
    w = np.asarray(w)
    return np.sum(k * g / (g - w[..., None]), axis=-1) / n


class Phi0(NamedTuple):
    value: float
    regime: str
    residual: float


def phi0_bounds(spec: Spectrum, n: int) -> tuple[float, float]:
    """Lower and upper bounds on |phi0| in the undersampled regime."""
    g, k = spec.gamma, spec.mult
    kk = spec.rank
    lo = abs(kk / n - 1.0) / (np.sum(k / g) / n)
    hi = g.max() * (kk / n - 1.0)
    return float(lo), float(hi)


def solve_phi0(spec: Spectrum, n: int) -> Phi0:
    """Smallest root of ``w (1 - Phi(w))``: 0 if K < N, else the negative root of Phi = 1."""
    reg = regime(spec.rank, n)
    if reg == OVERSAMPLED:
        return Phi0(0.0, reg, 0.0)
    lo_mag, hi_mag = phi0_bounds(spec, n)
    f = lambda x: float(phi_function(spec, n, x)) - 1.0
    a = -hi_mag * (1 + 1e-9) - 1e-300
    b = -lo_mag * (1 - 1e-9)
    while f(a) > 0:
        a *= 2.0
    x = find_root_bracketed(f, a, b, tol=1e-15)
    return Phi0(x, reg, abs(f(x)))


def phi_roots(spec: Spectrum, n: int) -> np.ndarray:
    """All roots of ``Phi(w) = 1`` (one below gamma_1 and one per gap), ascending."""
    g = spec.gamma
    f = lambda x: float(phi_function(spec, n, x)) - 1.0
    roots = []
    if spec.rank > n:
        roots.append(solve_phi0(spec, n).value)
    else:
        # Phi(0) = K/N < 1 and Phi -> +inf at gamma_1
        roots.append(find_root_bracketed(f, 0.0, g[0] * (1 - 1e-15), tol=1e-15))
    for a, b in zip(g[:-1], g[1:]):
        # Phi runs from -inf to +inf across each gap
        d = 0.25 * (b - a)
        while d > 4 * np.finfo(float).eps * b and (f(a + d) >= 0 or f(b - d) <= 0):
            d *= 0.25
        roots.append(find_root_bracketed(f, a + d, b - d, tol=1e-15))
    return np.array(roots)


def z_of_omega(spec: Spectrum, n: int, w):
    w = np.asarray(w)
    return w * (1.0 - phi_function(spec, n, w))


def dz_domega(spec: Spectrum, n: int, w):
    """``z'(w) = 1 - (1/N) sum K gamma^2 / (gamma - w)^2``."""
    g, k = spec.gamma, spec.mult
    w = np.asarray(w)
    return 1.0 - np.sum(k * g ** 2 / (g - w[..., None]) ** 2, axis=-1) / n


def omega_stability(spec: Spectrum, n: int, w):
    """``(1/N) sum K gamma^2 / |gamma - w|^2``; below 1 on a valid contour."""
    g, k = spec.gamma, spec.mult
    w = np.asarray(w)
    return np.sum(k * g ** 2 / np.abs(g - w[..., None]) ** 2, axis=-1) / n


def log_z_continuous(spec: Spectrum, n: int, w, roots=None):
    """``log z(w)`` on the branch that is real for real w above the spectrum.

    Uses ``z = w prod(w - r_i) / prod(w - gamma_m)`` to pick the branch: the cuts
    of the enclosed zeros and poles cancel pairwise, so the sum of principal
    logs is continuous along any contour that excludes only the smallest root.
    """
    if roots is None:
        roots = phi_roots(spec, n)
    w = np.asarray(w, dtype=complex)
    z = z_of_omega(spec, n, w)
    branch = (np.log(w) + np.sum(np.log(w[..., None] - roots), axis=-1)
              - np.sum(np.log(w[..., None] - spec.gamma), axis=-1))
    ang = np.angle(z)
    turns = np.round((branch.imag - ang) / (2 * np.pi))
    return np.log(np.abs(z)) + 1j * (ang + 2 * np.pi * turns)


@dataclass(frozen=True)
class OmegaContour:
    contour: Contour
    phi0: float
    roots: np.ndarray
    stability_max: float


def _critical_point(spec, n, lo, hi):
    return find_root_bracketed(lambda x: float(dz_domega(spec, n, x)), lo, hi, tol=1e-15)


LOG_HEIGHT = 0.75 * np.pi


def omega_contour(spec: Spectrum, n: int, node_count: int = 1024,
                  orientation: str = "cw", shape: str = "log",
                  height: float = LOG_HEIGHT) -> OmegaContour:
    """Contour enclosing the positive eigenvalues and every root of z except phi0.

    The left crossing sits halfway between phi0 and the critical point of z
    below gamma_1; the right crossing lies beyond the critical point of z above
    the largest eigenvalue. The image of the contour under z then encloses the
    asymptotic support while leaving the origin (or the negative axis) outside.
    ``shape="log"`` uses an ellipse in ``log(w - phi0)`` (fast trapezoid
    convergence for spread-out spectra); ``shape="circle"`` a plain circle.
    """
    regime(spec.rank, n)
    g = spec.gamma
    roots = phi_roots(spec, n)
    phi0 = min(0.0, roots[0])
    x_star = _critical_point(spec, n, phi0 + 1e-15 * g[0], g[0] * (1 - 1e-15))
    x_left = 0.5 * (phi0 + x_star)
    hi = g[-1] + 1.0
    while dz_domega(spec, n, hi) <= 0:
        hi = g[-1] + 2.0 * (hi - g[-1])
    x_crit = _critical_point(spec, n, g[-1] * (1 + 1e-15), hi)
    x_right = x_crit + 0.5 * (x_crit - x_left)
    enclosed = list(g) + [r for r in np.concatenate([[0.0], roots]) if r > phi0 + 1e-15 * g[-1]]
    kw = dict(node_count=node_count, orientation=orientation,
              must_enclose=enclosed, must_exclude=[phi0])
    if shape == "log":
        lo, hi = np.log(x_left - phi0), np.log(x_right - phi0)
        half = 0.5 * (hi - lo)
        c = Contour(0.5 * (lo + hi), (half, min(half, height)), log_origin=phi0, **kw)
    elif shape == "circle":
        c = Contour.circle_through(x_left, x_right, **kw)
    else:
        raise ValueError(f"unknown contour shape {shape!r}")
    w, _ = c.nodes()
    smax = float(omega_stability(spec, n, w).max())
    if smax >= 1.0:
        raise NumericalError(f"omega contour leaves the stable region (max {smax:.3f})")
    return OmegaContour(c, phi0, roots, smax)


def integral_I_closed(spec: Spectrum, n: int, k: int | None = None, m_dim: int | None = None) -> float:
    """Closed form of the log-integral against the deterministic Stieltjes transform."""
    k = spec.rank if k is None else k
    m = spec.dim if m_dim is None else m_dim
    g, kk = spec.gamma, spec.mult
    if regime(k, n) == OVERSAMPLED:
        return float(np.sum(kk * np.log(g)) / m + (n - k) / m * np.log(n / (n - k)) - k / m)
    phi0 = solve_phi0(spec, n).value
    return float(np.sum(kk * np.log(g - phi0)) / m + (n - k) / m * np.log(abs(phi0)) - n / m)


def integral_I_numeric(spec: Spectrum, n: int, node_count: int = 1024, rtol: float = 1e-12) -> float:
    """Same integral evaluated on an omega-plane contour (clockwise)."""
    oc = omega_contour(spec, n, node_count)
    g, k = spec.gamma, spec.mult
    m = spec.dim
    roots = oc.roots

    def integrand(w):
        lz = log_z_continuous(spec, n, w, roots)
        s = np.sum(k / (g - w[:, None]), axis=-1) / m
        return lz * s * dz_domega(spec, n, w) / (1.0 - phi_function(spec, n, w))

    return float(np.real(contour_integral(oc.contour, integrand, rtol=rtol) / (2j * np.pi)))


def _trace_moment_numeric(spec: Spectrum, n: int, node_count: int = 1024, rtol: float = 1e-12) -> float:
    """Clockwise integral of ``z m(z)``; equals the trace divided by M."""
    oc = omega_contour(spec, n, node_count)
    g, k = spec.gamma, spec.mult
    m = spec.dim

    def integrand(w):
        return w * np.sum(k / (g - w[:, None]), axis=-1) / m * dz_domega(spec, n, w)

    return float(np.real(contour_integral(oc.contour, integrand, rtol=rtol) / (2j * np.pi)))


def sigma2_bar(r, p: Projectors, n: int) -> float:
    """``tr(P_perp R) / (M - K~)`` with ``K~ = min(K, N)``."""
    kt = min(p.k, n)
    return float(np.real(np.sum(p.p_a_perp * np.asarray(r).T)) / (p.m - kt))


def eta_bar_cml(r, p: Projectors) -> float:
    return float(np.real(np.sum(p.p_a_perp * np.asarray(r).T)) / p.m)


def eta_bar_uml(r, p: Projectors, n: int) -> float:
    r = np.asarray(r)
    m, k = p.m, p.k
    reg = regime(k, n)
    prp = p.p_a @ r @ p.p_a
    if reg == OVERSAMPLED:
        s2 = sigma2_bar(r, p, n)
        w = np.linalg.eigvalsh(as_hermitian(s2 * p.p_a_perp + prp))
        return float(np.sum(np.log(w)) / m + (n - k) / m * np.log(n / (n - k)) - k / m)
    phi0 = solve_phi0(projected_spectrum(r, p), n).value
    s2 = sigma2_bar(r, p, n)
    w = np.linalg.eigvalsh(as_hermitian(abs(phi0) * np.eye(m) + prp))
    return float(np.sum(np.log(w)) / m + (m - n) / m * np.log(s2)
                 - (m - n) / m * np.log(abs(phi0)) - n / m)


def eta_bar_cml_contour(r, p: Projectors, n: int, node_count: int = 1024) -> float:
    """Contour oracle: trace moment of R minus that of ``P_A R P_A``."""
    return (_trace_moment_numeric(projected_spectrum(r), n, node_count)
            - _trace_moment_numeric(projected_spectrum(r, p), n, node_count))


def eta_bar_uml_contour(r, p: Projectors, n: int, node_count: int = 1024) -> float:
    """Contour oracle: ``((M-K~)/M) log sigma2_bar + I`` with I from the contour."""
    kt = min(p.k, n)
    return float((p.m - kt) / p.m * np.log(sigma2_bar(r, p, n))
                 + integral_I_numeric(projected_spectrum(r, p), n, node_count))


def empirical_stieltjes(r_a_hat, z: complex) -> complex:
    """``(1/M) tr (R_hat_A - z I)^{-1}`` through the eigenvalues."""
    w = np.linalg.eigvalsh(as_hermitian(r_a_hat))
    dist = np.abs(w - z).min()
    if dist <= 1e-12:
        raise NumericalError(f"z={z} is within {dist:.1e} of an eigenvalue")
    return complex(np.mean(1.0 / (w - z)))


def _support_edges(spec: Spectrum, n: int):
    g = spec.gamma
    roots = phi_roots(spec, n)
    phi0 = min(0.0, roots[0])
    x_star = _critical_point(spec, n, phi0 + 1e-15 * g[0], g[0] * (1 - 1e-15))
    hi = g[-1] + 1.0
    while dz_domega(spec, n, hi) <= 0:
        hi = g[-1] + 2.0 * (hi - g[-1])
    x_crit = _critical_point(spec, n, g[-1] * (1 + 1e-15), hi)
    return x_star, x_crit


def solve_omega(spec: Spectrum, n: int, z: complex, tol: float = 1e-12) -> complex:
    """Solution of ``w (1 - Phi(w)) = z`` on the branch continuing ``w ~ z`` at infinity.

    Im z > 0: Newton iterations from several starts, keeping iterates in the
    upper half plane; the solution with Im w > 0 is unique. Real z outside the
    support: bisection on the increasing branch of z(w).
    """
    z = complex(z)
    scale = max(spec.gamma.max(), abs(z), 1.0)
    if z.imag > 0:
        trace = []
        for start in (z, z + 1j * scale, z + 0.1j * scale, z + 10j * scale,
                      z.real + 1j * max(z.imag, 1e-3 * scale)):
            w = complex(start)
            for _ in range(200):
                f = complex(z_of_omega(spec, n, w)) - z
                d = complex(dz_domega(spec, n, w))
                step = f / d
                w_new = w - step
                lam = 1.0
                while w_new.imag <= 0 and lam > 1e-12:
                    lam *= 0.5
                    w_new = w - lam * step
                if w_new.imag <= 0:
                    break
                w = w_new
                if abs(step) <= 1e-15 * max(abs(w), 1.0):
                    break
            res = abs(complex(z_of_omega(spec, n, w)) - z)
            trace.append(res)
            if w.imag > 0 and res <= tol * max(1.0, abs(z)):
                return w
        raise NumericalError(f"omega iteration failed at z={z}: residuals {trace}")
    if z.imag < 0:
        return solve_omega(spec, n, z.conjugate(), tol).conjugate()
    x = z.real
    x_star, x_crit = _support_edges(spec, n)
    f = lambda w: float(z_of_omega(spec, n, w)) - x
    if x < float(z_of_omega(spec, n, x_star)):
        lo = min(-1.0, x)
        while f(lo) > 0:
            lo *= 2.0
        return complex(find_root_bracketed(f, lo, x_star, tol=1e-15))
    if x > float(z_of_omega(spec, n, x_crit)):
        hi = max(2.0 * x_crit, x + 1.0)
        while f(hi) < 0:
            hi *= 2.0
        return complex(find_root_bracketed(f, x_crit, hi, tol=1e-15))
    raise NumericalError(f"real z={x} lies inside the asymptotic support")


def omega_prime(spec: Spectrum, n: int, w) -> complex:
    """``dw/dz = 1 / z'(w)``."""
    return 1.0 / dz_domega(spec, n, w)


def stieltjes_det_equiv(spec: Spectrum, n: int, z: complex) -> complex:
    """Deterministic equivalent ``(w/z) (1/M) sum K_m / (gamma_m - w)`` of the Stieltjes transform."""
    w = solve_omega(spec, n, z)
    vals, mults = spec.values, spec.multiplicities
    return complex(w / z * np.sum(mults / (vals - w)) / spec.dim)


# deterministic cost surfaces over batches of angle vectors

def _batched_phi0(alpha, n: int, iters: int = 200):
    """Negative root of ``(1/N) sum alpha/(alpha - x) = 1`` per row.

    The left side is convex and increasing on x < 0, so Newton started right
    of the root (at minus the lower bound on |phi0|) decreases monotonically
    onto it.
    """
    k = alpha.shape[-1]
    x = -(k / n - 1.0) / (np.sum(1.0 / alpha, axis=-1) / n)
    for _ in range(iters):
        d = alpha - x[..., None]
        f = np.sum(alpha / d, axis=-1) / n - 1.0
        fp = np.sum(alpha / d ** 2, axis=-1) / n
        step = f / fp
        x = x - step
        if np.all(np.abs(step) <= 1e-15 * np.abs(x)):
            break
    return x


def deterministic_cost(method: str, r, manifold: Manifold, n: int) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised ``theta (B, K) -> eta_bar (B,)`` for CML or UML."""
    r = as_hermitian(r)
    m = manifold.element_count
    tr_r = float(np.real(np.trace(r)))

    def inner_of(thetas):
        a = steering_matrix(manifold, thetas)
        w, s, vh = np.linalg.svd(a, full_matrices=False)
        u = w @ vh
        inner = np.swapaxes(u.conj(), -1, -2) @ r @ u
        return 0.5 * (inner + np.swapaxes(inner.conj(), -1, -2))

    def cml(thetas):
        thetas = np.atleast_2d(thetas)
        inner = inner_of(thetas)
        return (tr_r - np.real(np.trace(inner, axis1=-2, axis2=-1))) / m

    def uml(thetas):
        thetas = np.atleast_2d(thetas)
        k = thetas.shape[-1]
        reg = regime(k, n)
        inner = inner_of(thetas)
        alpha = np.linalg.eigvalsh(inner)
        perp = tr_r - alpha.sum(axis=-1)
        if reg == OVERSAMPLED:
            s2 = perp / (m - k)
            return ((m - k) / m * np.log(s2) + np.sum(np.log(alpha), axis=-1) / m
                    + (n - k) / m * np.log(n / (n - k)) - k / m)
        phi0 = _batched_phi0(alpha, n)
        s2 = perp / (m - n)
        mag = np.abs(phi0)
        return (np.sum(np.log(alpha + mag[..., None]), axis=-1) / m + (m - k) / m * np.log(mag)
                + (m - n) / m * np.log(s2) - (m - n) / m * np.log(mag) - n / m)

    if method == "CML":
        return cml
    if method == "UML":
        return uml
    raise ValueError(f"unknown method {method!r}")


__all__ = [
    "Spectrum", "Phi0", "OmegaContour", "spectrum_from_eigenvalues", "projected_spectrum",
    "phi_function", "phi0_bounds", "solve_phi0", "phi_roots", "z_of_omega", "dz_domega",
    "omega_stability", "log_z_continuous", "omega_contour", "integral_I_closed",
    "integral_I_numeric", "sigma2_bar", "eta_bar_cml", "eta_bar_uml", "eta_bar_cml_contour",
    "eta_bar_uml_contour", "empirical_stieltjes", "solve_omega", "omega_prime",
    "stieltjes_det_equiv", "deterministic_cost",
]
