import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retrialq import kron
from retrialq.errors import DimensionCapError
from retrialq.model import PhaseType, RetrialPH


def test_kron_sum_eigenvalues_add():
    A = np.array([[-1.0, 1.0], [0.0, -3.0]])
    B = np.array([[-2.0, 0.5], [0.0, -0.5]])
    ev = np.sort(np.linalg.eigvals(kron.kron_sum(A, B)).real)
    expected = np.sort([a + b for a in (-1, -3) for b in (-2, -0.5)])
    np.testing.assert_allclose(ev, expected, atol=1e-12)


def test_kron_power_sum_edge_cases():
    A = np.array([[-2.0]])
    assert kron.kron_power_sum(A, 0).tolist() == [[0.0]]
    assert kron.kron_power_sum(A, 3).tolist() == [[-6.0]]
    with pytest.raises(ValueError):
        kron.kron_power_sum(A, -1)


def test_kron_sum_rejects_rectangular():
    with pytest.raises(ValueError):
        kron.kron_sum(np.ones((2, 3)), np.eye(2))


@given(k=st.integers(1, 4), n=st.integers(1, 3), seed=st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_psi_phi_conserve(k, n, seed):
    # generator rows of k parallel PH servers: Psi e + Phi e = 0
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 1, (n, n))
    np.fill_diagonal(A, 0)
    np.fill_diagonal(A, -(A.sum(1) + rng.uniform(0.1, 1, n)))
    p = PhaseType(np.full(n, 1 / n), A)
    psi = kron.psi_service(p, k)
    phi = kron.phi_service(p, k)
    assert psi.shape == (n ** k, n ** k)
    assert phi.shape == (n ** k, n ** (k - 1))
    np.testing.assert_allclose(psi.sum(1) + phi.sum(1), 0, atol=1e-12)


def test_position_sum_scalar_counts_positions():
    out = kron.position_sum(np.array([[2.0]]), 4)
    assert out.tolist() == [[8.0]]


def test_orbit_operators_balance():
    r = RetrialPH([0.5, 0.5], [[-2.0, 2.0], [0.0, -2.0]], [0.0, 1.0], [0.0, 1.0])
    for l in range(1, 4):
        psi = kron.psi_orbit(r, l)
        leave = kron.phi_orbit_leave(r, l)
        retry = kron.phi_orbit_retry(r, l)
        np.testing.assert_allclose(psi.sum(1) + leave.sum(1) + retry.sum(1), 0, atol=1e-12)
        # a failed attempt returns the customer to the orbit
        failed = kron.psi_orbit_failed(r, l)
        np.testing.assert_allclose(failed.sum(1), retry.sum(1), atol=1e-12)


def test_success_restarts_service():
    r = RetrialPH([1.0], [[-1.0]], [0.4], [0.6])
    out = kron.phi_orbit_success(r, np.array([0.25, 0.75]), 2)
    # two customers, each firing at 0.6, then service phase drawn from beta
    assert out.shape == (1, 2)
    np.testing.assert_allclose(out, [[0.3, 0.9]])


def test_dimension_cap():
    with pytest.raises(DimensionCapError):
        kron.kron_product(np.eye(50), np.eye(50), cap=1000)
    with pytest.raises(DimensionCapError):
        kron.kron_power_sum(np.eye(4), 6, cap=10**6)
