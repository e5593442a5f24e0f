"""Block-tridiagonal generator of the level-dependent QBD.

Levels are orbit sizes. For level ``l`` the three blocks are

* ``up``   (``l -> l+1``): a blocked new call, or a new call preempted by a
  handoff arrival, joins the orbit;
* ``main`` (``l -> l``): arrivals into idle channels, service completions,
  phase changes and failed retrials;
* ``down`` (``l -> l-1``): abandonment, or a successful retrial seizing an
  idle channel.

Blocks are CSR matrices composed from small dense Kronecker factors. Tensor
order inside every ``(kappa, j)`` segment is fixed by :mod:`retrialq.states`.
At the truncation level the up-transitions are redirected into the same
level: the displaced or blocked new call is lost, but the MMAP phase jump
and the handoff's seizure of the channel still happen.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import kron
from .errors import DimensionCapError
from .model import ModelConfig
from .states import LevelLayout, OrbitSpace

MAX_LEVEL_DIM = 200_000


DENSE_KRON_ENTRIES = 4096


def _skron(service, orbit):
    """``service (x) orbit`` with a dense service factor and sparse orbit factor.

    Small products come back as dense arrays; scipy's per-call overhead
    dominates there. Equal-shape products always share a representation.
    """
    n = service.shape[0] * service.shape[1] * orbit.shape[0] * orbit.shape[1]
    if n <= DENSE_KRON_ENTRIES:
        svc = service.toarray() if sparse.issparse(service) else np.asarray(service)
        return np.kron(svc, orbit.toarray())
    return sparse.kron(sparse.csr_matrix(service), orbit, format="csr")


def _eye(n):
    return sparse.identity(n, format="csr")


class _BlockBuilder:
    """Accumulates sub-blocks at segment offsets and emits one CSR matrix."""

    def __init__(self, rows: LevelLayout, cols: LevelLayout):
        self.rows, self.cols = rows, cols
        self.r, self.c, self.v = [], [], []

    def add(self, src, dst, block):
        exp = (self.rows.segment_size(*src), self.cols.segment_size(*dst))
        if block.shape != exp:
            raise AssertionError(f"block {src}->{dst} has shape {block.shape}, expected {exp}")
        if isinstance(block, np.ndarray):
            row, col = np.nonzero(block)
            data = block[row, col]
        else:
            b = sparse.coo_matrix(block)
            row, col, data = b.row, b.col, b.data
        self.r.append(row + self.rows.offsets[src])
        self.c.append(col + self.cols.offsets[dst])
        self.v.append(data)

    def build(self):
        shape = (self.rows.dim, self.cols.dim)
        if not self.r:
            return sparse.csr_matrix(shape)
        return sparse.csr_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=shape)


@dataclass(frozen=True, eq=False)
class LevelBlocks:
    level: int
    up: sparse.csr_matrix
    main: sparse.csr_matrix
    down: sparse.csr_matrix | None
    layout: LevelLayout


class Generator:
    """Level-block factory for one configuration and representation.

    Each block is a sum of ``service factor (x) orbit factor`` terms. The
    service factors are small and built densely; one sparse Kronecker
    product per term attaches the orbit operator. Blocks are cached per
    level; insertion into the cache is serialised so distinct levels can be
    built from several threads.
    """

    def __init__(self, cfg: ModelConfig, mode: str = "lumped", max_level_dim: int = MAX_LEVEL_DIM):
        self.cfg = cfg
        self.mode = mode
        self.orbit = OrbitSpace.shared(cfg.retrial, mode)
        self.max_level_dim = max_level_dim
        self._cache = {}
        self._svc = {}
        self._lock = threading.Lock()
        m = cfg.mmap
        self.C0, self.C_N, self.C_H = m.C0, m.C_N, m.C_H
        self.beta_h = cfg.service_h.beta.reshape(1, -1)
        self.beta_n = cfg.service_n.beta.reshape(1, -1)

    def layout(self, level: int) -> LevelLayout:
        lay = LevelLayout.of(self.cfg, level, self.mode)
        if lay.dim > self.max_level_dim:
            raise DimensionCapError(
                f"level {level} has dimension {lay.dim} > cap {self.max_level_dim}",
                level=level, dimension=lay.dim)
        return lay

    def _cached(self, key, build):
        hit = self._cache.get(key)
        if hit is None:
            hit = build()
            with self._lock:
                self._cache.setdefault(key, hit)
        return hit

    # -- dense service factors, independent of the level
    def _service(self, key, build):
        hit = self._svc.get(key)
        if hit is None:
            hit = self._svc[key] = build()
        return hit

    def svc_main(self, kappa, j):
        """Arrival-free MMAP moves and service phase changes within (kappa, j)."""
        def build():
            S = self.cfg.S
            C0 = self.C0 + self.C_H if (kappa == S and j == S) else self.C0
            parts = [C0, kron.psi_service(self.cfg.service_h, j),
                     kron.psi_service(self.cfg.service_n, kappa - j)]
            return _dense_ksum(parts)
        return self._service(("main", kappa, j), build)

    def svc_new_arrival(self, kappa, j):
        """(kappa, j) -> (kappa+1, j): new call seizes an idle channel."""
        _, M_H, M_N, _ = self.cfg.dims
        return self._service(("an", kappa, j), lambda: kron.kron_all(
            self.C_N, np.eye(M_H ** j * M_N ** (kappa - j)), self.beta_n))

    def svc_handoff_arrival(self, kappa, j):
        """(kappa, j) -> (kappa+1, j+1): handoff call seizes an idle channel."""
        _, M_H, M_N, _ = self.cfg.dims
        return self._service(("ah", kappa, j), lambda: kron.kron_all(
            self.C_H, np.eye(M_H ** j), self.beta_h, np.eye(M_N ** (kappa - j))))

    def svc_new_done(self, kappa, j):
        L, M_H, _, _ = self.cfg.dims
        return self._service(("dn", kappa, j), lambda: kron.kron_all(
            np.eye(L * M_H ** j), kron.phi_service(self.cfg.service_n, kappa - j)))

    def svc_handoff_done(self, kappa, j):
        _, _, M_N, _ = self.cfg.dims
        return self._service(("dh", kappa, j), lambda: kron.kron_all(
            np.eye(self.cfg.mmap.L), kron.phi_service(self.cfg.service_h, j),
            np.eye(M_N ** (kappa - j))))

    def svc_blocked(self, j):
        """All channels busy: a new call arrives (MMAP jump only)."""
        _, M_H, M_N, _ = self.cfg.dims
        S = self.cfg.S
        return self._service(("bn", j), lambda: kron.kron_all(
            self.C_N, np.eye(M_H ** j * M_N ** (S - j))))

    def svc_preempt(self, j):
        """(S, j) -> (S, j+1): a handoff call evicts the last new call."""
        _, M_H, M_N, _ = self.cfg.dims
        S = self.cfg.S
        return self._service(("pr", j), lambda: kron.kron_all(
            self.C_H, np.eye(M_H ** j), self.beta_h, np.eye(M_N ** (S - j - 1)),
            np.ones((M_N, 1))))

    # -- blocks
    def up(self, level: int) -> sparse.csr_matrix:
        return self._cached(("up", level), lambda: self._up(level, self.layout(level + 1),
                                                            self.orbit.join(level)))

    def closure(self, level: int) -> sparse.csr_matrix:
        """Up-transitions redirected into ``level`` (orbit unchanged)."""
        lay = self.layout(level)
        return self._cached(("closure", level),
                            lambda: self._up(level, lay, _eye(lay.orbit_dim)))

    def _up(self, level, target, orbit_map):
        S = self.cfg.S
        b = _BlockBuilder(self.layout(level), target)
        for j in range(S + 1):
            b.add((S, j), (S, j), _skron(self.svc_blocked(j), orbit_map))
            if j < S:
                b.add((S, j), (S, j + 1), _skron(self.svc_preempt(j), orbit_map))
        return b.build()

    def main(self, level: int, closed: bool = False) -> sparse.csr_matrix:
        base = self._cached(("main", level), lambda: self._main(level))
        if closed:
            return self._cached(("main_closed", level), lambda: (base + self.closure(level)).tocsr())
        return base

    def _main(self, level):
        S = self.cfg.S
        lay = self.layout(level)
        I_W = _eye(lay.orbit_dim)
        O_int = self.orbit.internal(level)
        O_sat = (O_int + self.orbit.failed(level)).tocsr()
        b = _BlockBuilder(lay, lay)
        for kappa, j in lay.segments:
            n_svc = lay.service_dim(kappa, j)
            Y = _skron(self.svc_main(kappa, j), I_W)
            Y = Y + _skron(_eye(n_svc), O_sat if kappa == S else O_int)
            b.add((kappa, j), (kappa, j), Y)
            if kappa < S:
                b.add((kappa, j), (kappa + 1, j), _skron(self.svc_new_arrival(kappa, j), I_W))
                b.add((kappa, j), (kappa + 1, j + 1), _skron(self.svc_handoff_arrival(kappa, j), I_W))
            if kappa >= 1 and j < kappa:
                b.add((kappa, j), (kappa - 1, j), _skron(self.svc_new_done(kappa, j), I_W))
            if kappa >= 1 and j >= 1:
                b.add((kappa, j), (kappa - 1, j - 1), _skron(self.svc_handoff_done(kappa, j), I_W))
        return b.build()

    def down(self, level: int) -> sparse.csr_matrix:
        """Block from ``level`` (>= 1) to ``level - 1``."""
        if level < 1:
            raise ValueError("down block needs level >= 1")
        return self._cached(("down", level), lambda: self._down(level))

    def _down(self, level):
        S = self.cfg.S
        src, dst = self.layout(level), self.layout(level - 1)
        O_leave = self.orbit.leave(level)
        O_succ = self.orbit.success(level, self.cfg.service_n.beta)
        b = _BlockBuilder(src, dst)
        for kappa, j in src.segments:
            I = _eye(src.service_dim(kappa, j))
            b.add((kappa, j), (kappa, j), _skron(I, O_leave))
            if kappa < S:
                b.add((kappa, j), (kappa + 1, j), _skron(I, O_succ))
        return b.build()

    def blocks(self, level: int, top: int | None = None) -> LevelBlocks:
        """Blocks of ``level``; when ``level == top`` the main block is closed
        and ``up`` is returned as an empty matrix."""
        lay = self.layout(level)
        if top is not None and level == top:
            up = sparse.csr_matrix((lay.dim, 0))
            main = self.main(level, closed=True)
        else:
            up, main = self.up(level), self.main(level)
        down = self.down(level) if level >= 1 else None
        return LevelBlocks(level, up, main, down, lay)


def _dense_ksum(mats):
    """Kronecker sum of small dense square factors."""
    out = np.zeros((1, 1))
    for m in mats:
        m = np.atleast_2d(m)
        out = np.kron(out, np.eye(m.shape[0])) + np.kron(np.eye(out.shape[0]), m)
    return out


def build_upper(level: int, cfg: ModelConfig, mode: str = "lumped") -> sparse.csr_matrix:
    return Generator(cfg, mode).up(level)


def build_lower(level_plus_1: int, cfg: ModelConfig, mode: str = "lumped") -> sparse.csr_matrix:
    return Generator(cfg, mode).down(level_plus_1)


def build_main(level: int, cfg: ModelConfig, mode: str = "lumped") -> sparse.csr_matrix:
    return Generator(cfg, mode).main(level)


def assemble_truncated(cfg: ModelConfig, M: int, mode: str = "lumped",
                       max_dim: int | None = None, gen: Generator | None = None) -> sparse.csr_matrix:
    """Full generator over levels ``0..M`` as one CSR matrix."""
    if M < 1:
        raise ValueError("truncation level M must be >= 1")
    gen = gen or Generator(cfg, mode)
    dims = [gen.layout(l).dim for l in range(M + 1)]
    total = sum(dims)
    if max_dim is not None and total > max_dim:
        raise DimensionCapError(f"truncated generator dimension {total} > cap {max_dim}",
                                level=M, dimension=total)
    grid = [[None] * (M + 1) for _ in range(M + 1)]
    for l in range(M + 1):
        grid[l][l] = gen.main(l, closed=(l == M))
        if l < M:
            grid[l][l + 1] = gen.up(l)
        if l >= 1:
            grid[l][l - 1] = gen.down(l)
    return sparse.bmat(grid, format="csr")


def level_row_sums(gen: Generator, level: int, top: int | None = None) -> np.ndarray:
    """Row sums of ``[down | main | up]`` for one level."""
    blk = gen.blocks(level, top)
    total = np.asarray(blk.main.sum(axis=1)).ravel()
    if blk.up.shape[1]:
        total += np.asarray(blk.up.sum(axis=1)).ravel()
    if blk.down is not None:
        total += np.asarray(blk.down.sum(axis=1)).ravel()
    return total


def export_triplets(block, fh) -> None:
    """Write a block as ``row col value`` lines with 17 significant digits."""
    coo = sparse.coo_matrix(block)
    order = np.lexsort((coo.col, coo.row))
    for i in order:
        fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")
