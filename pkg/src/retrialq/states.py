"""State-space enumeration per orbit level.

Within a level, states are grouped by ``(kappa, j)`` (busy channels, handoff
calls in service) in ascending order. Inside a group the tensor order is
``v`` (MMAP phase), the ``j`` handoff service phases, the ``kappa - j``
new-call service phases and finally the orbit descriptor. Every Kronecker
placement in the generator follows this order.

The orbit descriptor is either the ordered tuple of retrial phases
(``mode="ordered"``, ``N**l`` values) or the occupancy vector counting
customers per retrial phase (``mode="lumped"``, ``C(l+N-1, N-1)`` values).
Orbit customers are exchangeable, so the lumped chain is an exact
aggregation of the ordered one.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import comb

import numpy as np
from scipy import sparse

from . import kron
from .model import ModelConfig, RetrialPH

MODES = ("ordered", "lumped")


@lru_cache(maxsize=None)
def occupancies(l: int, N: int) -> tuple[tuple[int, ...], ...]:
    """Occupancy vectors of length ``N`` summing to ``l`` in colex order."""
    out = [tuple(reversed(c)) for c in itertools.product(range(l + 1), repeat=N)
           if sum(c) == l]
    # product over reversed coordinates is lexicographic in (n_{N-1}, ..., n_0)
    return tuple(out)


@lru_cache(maxsize=None)
def _occ_index(l: int, N: int) -> dict:
    return {n: i for i, n in enumerate(occupancies(l, N))}


def orbit_size(l: int, N: int, mode: str) -> int:
    if mode == "ordered":
        return N ** l
    if mode == "lumped":
        return comb(l + N - 1, N - 1)
    raise ValueError(f"unknown mode {mode!r}")


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass(frozen=True)
class StateCoord:
    level: int
    kappa: int
    j: int
    v: int
    s_h: tuple[int, ...]
    s_n: tuple[int, ...]
    r: tuple[int, ...]  # ordered phases, or occupancy counts in lumped mode


@dataclass(frozen=True)
class LevelLayout:
    level: int
    mode: str
    S: int
    L: int
    M_H: int
    M_N: int
    N: int

    @classmethod
    def of(cls, cfg: ModelConfig, level: int, mode: str = "lumped") -> "LevelLayout":
        _check_mode(mode)
        L, M_H, M_N, N = cfg.dims
        return cls(level, mode, cfg.S, L, M_H, M_N, N)

    @property
    def orbit_dim(self) -> int:
        return orbit_size(self.level, self.N, self.mode)

    def service_dim(self, kappa: int, j: int) -> int:
        return self.L * self.M_H ** j * self.M_N ** (kappa - j)

    def segment_size(self, kappa: int, j: int) -> int:
        return self.service_dim(kappa, j) * self.orbit_dim

    @cached_property
    def segments(self) -> list[tuple[int, int]]:
        return [(k, j) for k in range(self.S + 1) for j in range(k + 1)]

    @cached_property
    def offsets(self) -> dict[tuple[int, int], int]:
        out, pos = {}, 0
        for seg in self.segments:
            out[seg] = pos
            pos += self.segment_size(*seg)
        return out

    @cached_property
    def dim(self) -> int:
        return sum(self.segment_size(*seg) for seg in self.segments)

    def slice(self, kappa: int, j: int) -> slice:
        o = self.offsets[(kappa, j)]
        return slice(o, o + self.segment_size(kappa, j))

    def kappa_slice(self, kappa: int) -> slice:
        return slice(self.offsets[(kappa, 0)],
                     self.offsets[(kappa, kappa)] + self.segment_size(kappa, kappa))

    def _radices(self, kappa, j):
        return [self.L] + [self.M_H] * j + [self.M_N] * (kappa - j)

    def _orbit_index(self, r):
        if self.mode == "ordered":
            if len(r) != self.level or any(not 0 <= x < self.N for x in r):
                raise ValueError(f"bad ordered orbit descriptor {r} at level {self.level}")
            return int(np.ravel_multi_index(r, (self.N,) * self.level)) if r else 0
        key = tuple(r)
        idx = _occ_index(self.level, self.N).get(key)
        if idx is None:
            raise ValueError(f"bad occupancy vector {r} at level {self.level}")
        return idx

    def encode(self, c: StateCoord) -> int:
        if c.level != self.level or not 0 <= c.j <= c.kappa <= self.S:
            raise ValueError(f"coordinate {c} outside layout")
        if len(c.s_h) != c.j or len(c.s_n) != c.kappa - c.j:
            raise ValueError(f"phase tuples in {c} do not match (kappa, j)")
        digits = (c.v,) + tuple(c.s_h) + tuple(c.s_n)
        radices = self._radices(c.kappa, c.j)
        if any(not 0 <= d < r for d, r in zip(digits, radices)):
            raise ValueError(f"phase coordinate out of range in {c}")
        service = int(np.ravel_multi_index(digits, radices))
        return self.offsets[(c.kappa, c.j)] + service * self.orbit_dim + self._orbit_index(c.r)

    def decode(self, i: int) -> StateCoord:
        if not 0 <= i < self.dim:
            raise IndexError(f"index {i} outside [0, {self.dim})")
        for kappa, j in reversed(self.segments):
            if self.offsets[(kappa, j)] <= i:
                break
        rest = i - self.offsets[(kappa, j)]
        service, orb = divmod(rest, self.orbit_dim)
        digits = np.unravel_index(service, self._radices(kappa, j))
        digits = tuple(int(d) for d in digits)
        if self.mode == "ordered":
            r = tuple(int(d) for d in np.unravel_index(orb, (self.N,) * self.level)) if self.level else ()
        else:
            r = occupancies(self.level, self.N)[orb]
        return StateCoord(self.level, kappa, j, digits[0], digits[1:1 + j], digits[1 + j:], r)

    def __iter__(self):
        return (self.decode(i) for i in range(self.dim))


# ------------------------------------------------------------ orbit operators

class OrbitSpace:
    """Orbit-factor operators for one representation.

    ``internal(l)``, ``failed(l)``: ``W(l) x W(l)``; ``leave(l)``,
    ``retry(l)``: ``W(l) x W(l-1)``; ``join(l)``: ``W(l) x W(l+1)``.
    Returned as CSR matrices.
    """

    _shared: dict = {}
    _shared_lock = threading.Lock()

    def __init__(self, retrial: RetrialPH, mode: str):
        _check_mode(mode)
        self.retrial = retrial
        self.mode = mode
        self._cache = {}

    @classmethod
    def shared(cls, retrial: RetrialPH, mode: str) -> "OrbitSpace":
        """Instance reused across configs with an identical retrial law."""
        key = (mode,) + tuple(a.tobytes() for a in (
            retrial.gamma, retrial.Gamma, retrial.exit_leave, retrial.exit_retry))
        with cls._shared_lock:
            hit = cls._shared.get(key)
            if hit is None:
                hit = cls._shared[key] = cls(retrial, mode)
        return hit

    def size(self, l: int) -> int:
        return orbit_size(l, self.retrial.N, self.mode)

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = sparse.csr_matrix(build())
        return self._cache[key]

    def internal(self, l):
        return self._get(("int", l), lambda: self._internal(l))

    def failed(self, l):
        return self._get(("fail", l), lambda: self._failed(l))

    def leave(self, l):
        return self._get(("leave", l), lambda: self._exit(l, self.retrial.exit_leave))

    def retry(self, l):
        return self._get(("retry", l), lambda: self._exit(l, self.retrial.exit_retry))

    def join(self, l):
        return self._get(("join", l), lambda: self._join(l))

    def success(self, l, beta_n):
        """Successful retrial into a channel: ``beta_N (x) retry(l)``.

        The service phase is the leading column factor so the call lands
        at the end of the new-call phase tuple.
        """
        beta_n = np.asarray(beta_n, dtype=float).reshape(1, -1)
        return self._get(("succ", l, beta_n.tobytes()),
                         lambda: sparse.kron(beta_n, self.retry(l)))

    def leave_mass(self, l) -> np.ndarray:
        """Per-state total abandonment rate."""
        if l == 0:
            return np.zeros(1)
        return np.asarray(self.leave(l).sum(axis=1)).ravel()

    def retry_mass(self, l) -> np.ndarray:
        if l == 0:
            return np.zeros(1)
        return np.asarray(self.retry(l).sum(axis=1)).ravel()

    # ordered builders use the literal Kronecker formulas
    def _internal(self, l):
        if self.mode == "ordered":
            return kron.psi_orbit(self.retrial, l)
        G = self.retrial.Gamma
        return self._lumped_moves(l, lambda a, b: G[a, b])

    def _failed(self, l):
        if self.mode == "ordered":
            return kron.psi_orbit_failed(self.retrial, l)
        g2, gam = self.retrial.exit_retry, self.retrial.gamma
        return self._lumped_moves(l, lambda a, b: g2[a] * gam[b])

    def _exit(self, l, rates):
        if l < 1:
            raise ValueError("orbit exit needs l >= 1")
        if self.mode == "ordered":
            return kron.position_sum(rates, l)
        N = self.retrial.N
        src, dst = occupancies(l, N), _occ_index(l - 1, N)
        out = sparse.lil_matrix((len(src), len(dst)))
        for i, n in enumerate(src):
            for a in range(N):
                if n[a] and rates[a]:
                    m = list(n)
                    m[a] -= 1
                    out[i, dst[tuple(m)]] += n[a] * rates[a]
        return out

    def _join(self, l):
        gam = self.retrial.gamma
        if self.mode == "ordered":
            return np.kron(np.eye(self.size(l)), gam.reshape(1, -1))
        N = self.retrial.N
        src, dst = occupancies(l, N), _occ_index(l + 1, N)
        out = sparse.lil_matrix((len(src), len(dst)))
        for i, n in enumerate(src):
            for b in range(N):
                if gam[b]:
                    m = list(n)
                    m[b] += 1
                    out[i, dst[tuple(m)]] += gam[b]
        return out

    def _lumped_moves(self, l, rate):
        """Occupancy transitions where one customer moves from phase a to b."""
        N = self.retrial.N
        states, idx = occupancies(l, N), _occ_index(l, N)
        out = sparse.lil_matrix((len(states), len(states)))
        for i, n in enumerate(states):
            for a in range(N):
                if not n[a]:
                    continue
                for b in range(N):
                    r = rate(a, b)
                    if not r:
                        continue
                    m = list(n)
                    m[a] -= 1
                    m[b] += 1
                    out[i, idx[tuple(m)]] += n[a] * r
        return out


def orbit_lump_matrix(l: int, N: int) -> sparse.csr_matrix:
    """0/1 map from ordered orbit tuples to occupancy vectors."""
    idx = _occ_index(l, N)
    rows, cols = [], []
    for i, r in enumerate(itertools.product(range(N), repeat=l)):
        n = [0] * N
        for x in r:
            n[x] += 1
        rows.append(i)
        cols.append(idx[tuple(n)])
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(N ** l, len(idx)))


def lump_matrix(level: int, cfg: ModelConfig) -> sparse.csr_matrix:
    """Aggregation matrix V (ordered states x lumped states) for one level."""
    ordered = LevelLayout.of(cfg, level, "ordered")
    V_orb = orbit_lump_matrix(level, cfg.retrial.N)
    blocks = [sparse.kron(sparse.identity(ordered.service_dim(k, j)), V_orb)
              for k, j in ordered.segments]
    return sparse.block_diag(blocks, format="csr")
