import itertools

import numpy as np
import pytest

from mldoa.array_model import Manifold, Scenario, ThetaPoint, generate_snapshots, sample_covariance, steering_matrix
from mldoa.errors import NumericalError, RegimeError
from mldoa.ml_costs import (OVERSAMPLED, UNDERSAMPLED, cml_cost, cml_cost_batch, profile_neg_loglik, projectors,
                            regime, sigma2_tilde, uml_cost, uml_cost_batch, uml_cost_eigen_form,
                            uml_exact_profile, uml_profile_candidates)
from mldoa.numerics import log_pseudo_det


def random_steering(rng, m, k):
    return steering_matrix(Manifold(m), np.sort(rng.uniform(-3, 3, k)))


def random_rhat(rng, m, n):
    y = rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))
    return sample_covariance(y)


class TestRegime:
    def test_values(self):
        assert regime(2, 10) == OVERSAMPLED
        assert regime(6, 3) == UNDERSAMPLED

    def test_boundary(self):
        with pytest.raises(RegimeError, match="boundary regime unsupported"):
            regime(4, 4)


class TestProjectors:
    def test_identity_columns(self):
        p = projectors(np.eye(5)[:, :2])
        assert np.allclose(p.p_a, np.diag([1, 1, 0, 0, 0]))

    def test_column_space_invariance(self, rng):
        a = random_steering(rng, 8, 3)
        t = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        assert np.allclose(projectors(a).p_a, projectors(a @ t).p_a, atol=1e-10)

    def test_invariants(self, rng):
        a = random_steering(rng, 8, 3)
        p = projectors(a)
        assert np.trace(p.p_a).real == pytest.approx(3, abs=1e-10)
        assert np.trace(p.p_a_perp).real == pytest.approx(5, abs=1e-10)
        assert np.allclose(p.p_a @ p.p_a, p.p_a, atol=1e-10)
        assert np.allclose(p.p_a @ a, a, atol=1e-10)
        assert np.allclose(p.u_a.conj().T @ p.u_a, np.eye(3), atol=1e-10)
        assert np.allclose(p.gram_inv_sqrt @ (a.conj().T @ a) @ p.gram_inv_sqrt, np.eye(3), atol=1e-8)

    def test_degenerate(self):
        a = steering_matrix(Manifold(6), np.array([0.3, 0.3]))
        with pytest.raises(NumericalError, match="manifold degenerate"):
            projectors(a)


class TestCml:
    def test_identity(self, rng):
        p = projectors(random_steering(rng, 7, 2))
        assert cml_cost(p, np.eye(7)) == pytest.approx(5 / 7)

    def test_white(self, rng):
        p = projectors(random_steering(rng, 7, 2))
        assert cml_cost(p, 3.0 * np.eye(7)) == pytest.approx(3.0 * 5 / 7)

    def test_noiseless_at_truth(self):
        sc = Scenario(Manifold(8), ThetaPoint([-0.5, 0.7]), np.eye(2), 1.0, 20)
        r = sc.steering @ sc.source_cov @ sc.steering.conj().T
        assert abs(cml_cost(projectors(sc.steering), r)) <= 1e-10

    def test_nonnegative(self, rng):
        for _ in range(20):
            p = projectors(random_steering(rng, 6, 2))
            assert cml_cost(p, random_rhat(rng, 6, 4)) >= 0

    def test_sigma2_relation(self, rng):
        p = projectors(random_steering(rng, 10, 4))
        rh = random_rhat(rng, 10, 20)
        assert sigma2_tilde(p, rh, 4) == pytest.approx(cml_cost(p, rh) * 10 / 6, rel=1e-14)
        assert sigma2_tilde(p, np.eye(10), 4) == pytest.approx(1.0)

    def test_sigma2_undersampled_divisor(self, rng):
        p = projectors(random_steering(rng, 10, 4))
        rh = random_rhat(rng, 10, 3)
        tr_perp = np.trace(p.p_a_perp @ rh.matrix).real
        assert sigma2_tilde(p, rh, min(4, 3)) == pytest.approx(tr_perp / 7)

    def test_sigma2_bad_k(self, rng):
        p = projectors(random_steering(rng, 4, 2))
        with pytest.raises(ValueError):
            sigma2_tilde(p, np.eye(4), 4)


class TestUml:
    def test_identity(self, rng):
        p = projectors(random_steering(rng, 7, 2))
        ev = uml_cost(p, np.eye(7), n=20)
        assert ev.value == pytest.approx(0.0, abs=1e-14)
        assert ev.regime == OVERSAMPLED and ev.method == "UML"

    @pytest.mark.parametrize("m,k,n", [(6, 2, 10), (10, 4, 30), (12, 1, 3)])
    def test_dual_form_oversampled(self, rng, m, k, n):
        for _ in range(25):
            p = projectors(random_steering(rng, m, k))
            rh = random_rhat(rng, m, n)
            assert uml_cost(p, rh).value == pytest.approx(uml_cost_eigen_form(p, rh, n), abs=1e-10)

    @pytest.mark.parametrize("m,k,n", [(10, 4, 2), (10, 6, 3), (8, 3, 1)])
    def test_pseudo_det_undersampled(self, rng, m, k, n):
        for _ in range(25):
            p = projectors(random_steering(rng, m, k))
            rh = random_rhat(rng, m, n)
            ev = uml_cost(p, rh)
            s2 = sigma2_tilde(p, rh, n)
            ref = (m - n) / m * np.log(s2) + log_pseudo_det(p.p_a @ rh.matrix @ p.p_a) / m
            assert ev.regime == UNDERSAMPLED
            assert ev.value == pytest.approx(ref, abs=1e-9)
            assert uml_cost(p, rh.matrix, n=n).value == pytest.approx(ev.value, abs=1e-9)

    def test_boundary_rejected(self, rng):
        p = projectors(random_steering(rng, 6, 2))
        with pytest.raises(RegimeError):
            uml_cost(p, random_rhat(rng, 6, 2))

    def test_needs_n(self, rng):
        p = projectors(random_steering(rng, 6, 2))
        with pytest.raises(ValueError):
            uml_cost(p, np.eye(6))

    def test_wrong_snapshot_shape(self, rng):
        p = projectors(random_steering(rng, 6, 3))
        rh = random_rhat(rng, 6, 2)
        with pytest.raises(ValueError):
            uml_cost(p, rh, y=np.ones((6, 3)))

    def test_parameterization_invariance(self, rng):
        a = random_steering(rng, 8, 3)
        t = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        for n in (2, 12):
            rh = random_rhat(rng, 8, n)
            p1, p2 = projectors(a), projectors(a @ t)
            assert cml_cost(p1, rh) == pytest.approx(cml_cost(p2, rh), abs=1e-10)
            assert uml_cost(p1, rh).value == pytest.approx(uml_cost(p2, rh).value, abs=1e-10)
            assert uml_exact_profile(p1, rh).neg_loglik == pytest.approx(
                uml_exact_profile(p2, rh).neg_loglik, abs=1e-10)

    def test_assumption_flag(self):
        # a noise-only sample covariance along the tested directions violates the signal assumption
        p = projectors(np.eye(6)[:, :2])
        rh = np.diag([0.1, 0.1, 1.0, 1.0, 1.0, 1.0]).astype(complex)
        assert not uml_cost(p, rh, n=20).assumption_ok
        rh2 = np.diag([5.0, 4.0, 1.0, 1.0, 1.0, 1.0]).astype(complex)
        assert uml_cost(p, rh2, n=20).assumption_ok


class TestBatch:
    def test_matches_scalar(self, rng):
        m, k = 8, 3
        for n in (2, 20):
            ps = [projectors(random_steering(rng, m, k)) for _ in range(4)]
            rhs = [random_rhat(rng, m, n) for _ in range(5)]
            stack = np.stack([r.matrix for r in rhs])
            c = cml_cost_batch(np.stack([p.p_a_perp for p in ps]), stack)
            u = uml_cost_batch(np.stack([p.u_a for p in ps]), np.stack([p.p_a_perp for p in ps]), stack, n)
            for t, rh in enumerate(rhs):
                for l, p in enumerate(ps):
                    assert c[t, l] == pytest.approx(cml_cost(p, rh), abs=1e-12)
                    assert u[t, l] == pytest.approx(uml_cost(p, rh).value, abs=1e-10)


class TestExactProfile:
    def test_white(self, rng):
        p = projectors(random_steering(rng, 6, 2))
        prof = uml_exact_profile(p, 2.0 * np.eye(6))
        assert prof.m_star == 0
        assert prof.sigma2_hat == pytest.approx(2.0)
        assert np.allclose(prof.p_s_hat, 0)

    def test_strong_source_consistency(self):
        errs = []
        for snr in (10.0, 20.0, 30.0):
            sc = Scenario.equal_power(Manifold(8), ThetaPoint([0.4]), snr, 50)
            prof = uml_exact_profile(projectors(sc.steering), sc.covariance)
            assert prof.m_star == 1
            errs.append(abs(prof.p_s_hat[0, 0] - sc.source_cov[0, 0]) / sc.source_cov[0, 0])
            assert prof.sigma2_hat == pytest.approx(1.0, rel=1e-10)
        assert errs[-1] <= 1e-10

    def test_exhaustive_m(self, rng):
        for k in (1, 2, 3, 4):
            for _ in range(10):
                p = projectors(random_steering(rng, 8, k))
                sc = np.diag(rng.uniform(0.1, 4.0, k))
                a = random_steering(rng, 8, k)
                y = a @ np.sqrt(sc) @ (rng.standard_normal((k, 30)) + 1j * rng.standard_normal((k, 30)))
                y += rng.standard_normal((8, 30)) + 1j * rng.standard_normal((8, 30))
                rh = sample_covariance(y)
                prof = uml_exact_profile(p, rh)
                alpha, _, s2, adm = uml_profile_candidates(p, rh)
                for j in np.flatnonzero(adm):
                    assert prof.neg_loglik <= profile_neg_loglik(alpha, s2, 8, j) + 1e-10
                if prof.m_star:
                    assert np.all(alpha[:prof.m_star] > prof.sigma2_hat)
                assert np.linalg.eigvalsh(prof.p_s_hat).min() >= -1e-10

    def test_monotone_admissibility(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 5))
            p = projectors(random_steering(rng, 8, k))
            _, _, _, adm = uml_profile_candidates(p, random_rhat(rng, 8, 12))
            first_false = np.flatnonzero(~adm)
            if first_false.size:
                assert not adm[first_false[0]:].any()

    def test_loglik_matches_gaussian_likelihood(self, rng):
        # the profiled value equals log det(R_model) + tr(R_model^-1 R_hat) at the fitted parameters
        p = projectors(random_steering(rng, 6, 2))
        a = random_steering(rng, 6, 2)
        rh = sample_covariance(a @ (rng.standard_normal((2, 40)) + 1j * rng.standard_normal((2, 40)))
                               + 0.3 * (rng.standard_normal((6, 40)) + 1j * rng.standard_normal((6, 40))))
        prof = uml_exact_profile(p, rh)
        u = p.u_a @ np.linalg.inv(p.gram_inv_sqrt)
        model = u @ prof.p_s_hat @ u.conj().T + prof.sigma2_hat * np.eye(6)
        nll = np.linalg.slogdet(model)[1] + np.trace(np.linalg.solve(model, rh.matrix)).real
        assert prof.neg_loglik == pytest.approx(nll, rel=1e-9)
