"""Kronecker products/sums and the composite service and orbit operators.

All operators are dense numpy arrays. The k-fold constructs follow the
empty-product convention: zero copies give the 1x1 zero matrix, so block
formulas specialise to idle servers and an empty orbit without case splits.
"""

from __future__ import annotations

from functools import reduce

import numpy as np

from .errors import DimensionCapError
from .model import PhaseType, RetrialPH

MAX_ENTRIES = 2_000_000


def _check_size(rows, cols, cap):
    if rows * cols > cap:
        raise DimensionCapError(
            f"Kronecker result {rows}x{cols} exceeds the cap of {cap} entries",
            dimension=(rows, cols))


def _as2d(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a


def kron_product(A, B, cap: int = MAX_ENTRIES) -> np.ndarray:
    A, B = _as2d(A), _as2d(B)
    _check_size(A.shape[0] * B.shape[0], A.shape[1] * B.shape[1], cap)
    return np.kron(A, B)


def kron_all(*mats, cap: int = MAX_ENTRIES) -> np.ndarray:
    return reduce(lambda x, y: kron_product(x, y, cap), mats, np.ones((1, 1)))


def kron_sum(A, B, cap: int = MAX_ENTRIES) -> np.ndarray:
    """``A (+) B = A (x) I + I (x) B`` for square ``A`` and ``B``."""
    A, B = _as2d(A), _as2d(B)
    if A.shape[0] != A.shape[1] or B.shape[0] != B.shape[1]:
        raise ValueError(f"Kronecker sum needs square inputs, got {A.shape} and {B.shape}")
    n, m = A.shape[0], B.shape[0]
    _check_size(n * m, n * m, cap)
    return np.kron(A, np.eye(m)) + np.kron(np.eye(n), B)


def kron_power_sum(A, k: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """k-fold Kronecker sum ``A (+) ... (+) A``; ``k = 0`` gives ``[[0]]``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    A = _as2d(A)
    _check_size(A.shape[0] ** k, A.shape[0] ** k, cap)
    out = np.zeros((1, 1))
    for i in range(k):
        out = A.copy() if i == 0 else kron_sum(out, A, cap)
    return out


def position_sum(V, k: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """``sum_y I_{n^y} (x) V (x) I_{n^(k-1-y)}`` for an ``n x c`` factor ``V``.

    The operator acts on one of ``k`` identical tensor positions at a time;
    rows span ``n^k`` states and columns ``n^(k-1) * c``, with the ``V``
    output occupying the slot of the position it replaced.
    """
    if k < 1:
        raise ValueError("position_sum needs k >= 1")
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V.reshape(-1, 1)
    n, c = V.shape
    _check_size(n ** k, n ** (k - 1) * c, cap)
    out = np.zeros((n ** k, n ** (k - 1) * c))
    for y in range(k):
        out += np.kron(np.kron(np.eye(n ** y), V), np.eye(n ** (k - 1 - y)))
    return out


def psi_service(p: PhaseType, k: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Phase evolution of ``k`` calls in service: ``A (+) ... (+) A``."""
    return kron_power_sum(p.A, k, cap)


def phi_service(p: PhaseType, k: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Completion of any one of ``k`` calls in service; ``M^k x M^(k-1)``."""
    if k < 1:
        raise ValueError("phi_service needs k >= 1")
    return position_sum(p.A0, k, cap)


def psi_orbit(r: RetrialPH, l: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Retrial-phase evolution of ``l`` ordered orbit customers."""
    return kron_power_sum(r.Gamma, l, cap)


def psi_orbit_failed(r: RetrialPH, l: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Unsuccessful attempts: a retrying customer restarts in phase ~gamma."""
    return kron_power_sum(np.outer(r.exit_retry, r.gamma), l, cap)


def phi_orbit_leave(r: RetrialPH, l_plus_1: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Any one of ``l+1`` orbit customers abandons; ``N^(l+1) x N^l``."""
    if l_plus_1 < 1:
        raise ValueError("phi_orbit_leave needs l+1 >= 1")
    return position_sum(r.exit_leave, l_plus_1, cap)


def phi_orbit_retry(r: RetrialPH, l_plus_1: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Any one of ``l+1`` orbit customers fires its retry exit; ``N^(l+1) x N^l``."""
    if l_plus_1 < 1:
        raise ValueError("phi_orbit_retry needs l+1 >= 1")
    return position_sum(r.exit_retry, l_plus_1, cap)


def phi_orbit_success(r: RetrialPH, beta_n, l_plus_1: int, cap: int = MAX_ENTRIES) -> np.ndarray:
    """Successful retrial: one orbit customer leaves and starts service ~beta_N.

    The new service phase is the leading column factor, so columns read
    ``(new-call phase, remaining orbit)``. Placed after the existing
    new-call positions this appends the call to the end of ``s_N``,
    which is the tensor order used by every generator block.
    """
    beta_n = _as2d(beta_n)
    R = phi_orbit_retry(r, l_plus_1, cap)
    _check_size(R.shape[0], R.shape[1] * beta_n.shape[1], cap)
    return np.kron(beta_n, R)
