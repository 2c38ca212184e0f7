import numpy as np
import pytest

from mldoa.array_model import Manifold, Scenario, ThetaPoint, electrical_from_degrees

REF_DOAS_DEG = (16.0, 18.0, 60.0, -50.0)


def random_hermitian(rng, m, psd=False):
    x = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    return x @ x.conj().T / m if psd else 0.5 * (x + x.conj().T)


def reference_theta():
    return ThetaPoint(np.sort(electrical_from_degrees(REF_DOAS_DEG)))


def reference_scenario(snr_db=0.0, n=100):
    return Scenario.equal_power(Manifold(10), reference_theta(), snr_db, n)


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)
