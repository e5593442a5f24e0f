"""Steady state of the truncated LDQBD by backward rate-matrix recursion.

With ``R(M) = 0`` the rate matrices are obtained for ``l = M, ..., 1`` from

    R(l-1) = -Q[l-1, l] (Q[l, l] + R(l) Q[l+1, l])^{-1},

then the level-0 vector solves ``x0 (Q[0,0] + R(0) Q[1,0]) = 0`` and higher
levels follow from ``x(l+1) = x(l) R(l)``.

Only channel-saturated states (``kappa = S``) have transitions to the next
level, so ``Q[l-1, l]`` and hence ``R(l-1)`` are zero outside those rows.
Rate matrices are stored as the nonzero row block plus its row indices.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .errors import DimensionCapError, NonConvergenceError, SolverError
from .generator import Generator, assemble_truncated
from .model import ModelConfig, ctmc_stationary, require_valid
from .states import LevelLayout

log = logging.getLogger(__name__)

EQ1_TOL = 1e-9
BOUNDARY_TOL = 1e-10
CLAMP_TOL = 1e-12
DIRECT_MAX_DIM = 5000
DENSE_MAX_DIM = 8000


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Rate matrix with zero rows outside ``rows``."""

    rows: np.ndarray
    block: np.ndarray
    shape: tuple[int, int]

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows] = self.block
        return out

    def left(self, x: np.ndarray) -> np.ndarray:
        """``x @ R`` for a row vector ``x``."""
        return x[self.rows] @ self.block

    @property
    def min_entry(self) -> float:
        return float(self.block.min()) if self.block.size else 0.0


@dataclass(eq=False)
class SteadyState:
    M: int
    z: list[np.ndarray]
    R: list[RateMatrix]
    layouts: list[LevelLayout]
    mode: str
    cfg: ModelConfig
    residual: float = float("nan")
    eq1_residual: float = 0.0
    clamped: int = 0
    info: dict = field(default_factory=dict)

    @property
    def level_mass(self) -> np.ndarray:
        return np.array([zl.sum() for zl in self.z])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.z)

    def segment(self, level: int, kappa: int, j: int) -> np.ndarray:
        return self.z[level][self.layouts[level].slice(kappa, j)]


def _lu_transposed(D, level):
    """LU of ``D.T``; a C-ordered ``D`` is factored in place without a copy."""
    with warnings.catch_warnings():
        warnings.simplefilter("error", linalg.LinAlgWarning)
        try:
            lu, piv = linalg.lu_factor(D.T, overwrite_a=True, check_finite=False)
        except (linalg.LinAlgWarning, linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"inner matrix at level {level} is singular: {exc}", level=level) from exc
    d = np.abs(np.diag(lu))
    if d.size and not d.min() > 1e-14 * max(d.max(), 1.0):
        raise SolverError(f"inner matrix at level {level} is numerically singular", level=level)
    return lu, piv


def _check_dense(dim, level, cap):
    if dim > cap:
        raise DimensionCapError(f"level {level} dimension {dim} exceeds dense cap {cap}",
                                level=level, dimension=dim)


def rate_matrices(gen: Generator, M: int, dense_cap: int = DENSE_MAX_DIM, check: bool = True):
    """Backward recursion for ``R(0..M-1)``.

    Returns ``(R, D0, eq1)`` where ``D0 = Q[0,0] + R(0) Q[1,0]`` and ``eq1``
    is the largest per-level residual
    ``|| Q[l,l+1] + R(l) Q[l+1,l+1] + R(l) R(l+1) Q[l+2,l+1] ||_inf``
    (max-abs entry). The residual is evaluated from the factors, using
    ``R(l) (Q[l+1,l+1] + R(l+1) Q[l+2,l+1])`` with the sparse main block
    and the stored dense product ``R(l+1) Q[l+2,l+1]``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    _check_dense(gen.layout(M).dim, M, dense_cap)
    main = gen.main(M, closed=True)
    D = main.toarray()
    prev_rows, prev_P = None, None  # rows and value of R(l) Q[l+1,l]
    R: list[RateMatrix | None] = [None] * M
    eq1 = 0.0
    for l in range(M, 0, -1):
        U = gen.up(l - 1)
        rows = np.flatnonzero(np.diff(U.indptr))
        B = U[rows]
        lu = _lu_transposed(D, l)
        del D
        block = -linalg.lu_solve(lu, B.T.toarray(), trans=0, check_finite=False).T
        del lu
        if check and rows.size:
            res = B.toarray() + (main.T @ block.T).T
            if prev_P is not None:
                res += block[:, prev_rows] @ prev_P
            r = float(np.abs(res).max())
            del res
            eq1 = max(eq1, r)
            if not r <= EQ1_TOL:
                raise SolverError(f"rate-matrix equation residual {r:.3e} at level {l - 1}",
                                  level=l - 1)
        R[l - 1] = RateMatrix(rows, block, U.shape)
        _check_dense(gen.layout(l - 1).dim, l - 1, dense_cap)
        main = gen.main(l - 1)
        D = main.toarray()
        prev_rows = rows
        prev_P = (gen.down(l).T @ block.T).T if rows.size else np.zeros((0, D.shape[1]))
        if rows.size:
            D[rows] += prev_P
    return R, D, eq1


def boundary_solve(D0: np.ndarray) -> np.ndarray:
    """Nonnegative left null vector of the censored level-0 generator."""
    try:
        x = ctmc_stationary(D0)
    except Exception as exc:
        raise SolverError(f"level-0 censored generator has no unique solution: {exc}", level=0) from exc
    res = float(np.abs(x @ D0).max() / max(np.abs(x).max(), 1e-300))
    if not res <= BOUNDARY_TOL * max(1.0, np.abs(D0).max()):
        raise SolverError(f"boundary residual {res:.3e}", level=0)
    return x


def propagate_and_normalize(x0: np.ndarray, R: list[RateMatrix]) -> tuple[list[np.ndarray], int]:
    """``x(l+1) = x(l) R(l)`` then divide by the total mass."""
    xs = [np.asarray(x0, dtype=float)]
    for Rl in R:
        xs.append(Rl.left(xs[-1]))
    c = sum(float(x.sum()) for x in xs)
    if not c > 0 or not np.isfinite(c):
        raise SolverError(f"total mass {c} cannot be normalised")
    zs = [x / c for x in xs]
    clamped = 0
    for l, zl in enumerate(zs):
        neg = zl < 0
        if neg.any():
            worst = float(zl[neg].min())
            if worst < -CLAMP_TOL:
                raise SolverError(f"negative probability {worst:.3e} at level {l}", level=l)
            clamped += int(neg.sum())
            zl[neg] = 0.0
    return zs, clamped


def balance_residual(gen: Generator, z: list[np.ndarray]) -> float:
    """``|| z Q ||_inf`` for the truncated generator, assembled blockwise."""
    M = len(z) - 1
    worst = 0.0
    for l in range(M + 1):
        r = gen.main(l, closed=(l == M)).T @ z[l]
        if l >= 1:
            r += gen.up(l - 1).T @ z[l - 1]
        if l < M:
            r += gen.down(l + 1).T @ z[l + 1]
        worst = max(worst, float(np.abs(r).max()))
    return worst


def solve_fixed(cfg: ModelConfig, M: int, mode: str = "lumped", gen: Generator | None = None,
                dense_cap: int = DENSE_MAX_DIM) -> SteadyState:
    """Matrix-analytic steady state with the orbit truncated at ``M``."""
    gen = gen or Generator(cfg, mode)
    R, D0, eq1 = rate_matrices(gen, M, dense_cap)
    x0 = boundary_solve(D0)
    z, clamped = propagate_and_normalize(x0, R)
    ss = SteadyState(M=M, z=z, R=R, layouts=[gen.layout(l) for l in range(M + 1)],
                     mode=gen.mode, cfg=cfg, eq1_residual=eq1, clamped=clamped)
    ss.residual = balance_residual(gen, z)
    return ss


def direct_solve(cfg: ModelConfig, M: int, mode: str = "lumped",
                 max_dim: int = DIRECT_MAX_DIM) -> SteadyState:
    """Dense solve of ``z Q = 0, z e = 1`` on the whole truncated generator."""
    gen = Generator(cfg, mode)
    Q = assemble_truncated(cfg, M, mode, max_dim=max_dim, gen=gen).toarray()
    try:
        flat = ctmc_stationary(Q)
    except Exception as exc:
        raise SolverError(f"truncated generator has no unique stationary vector: {exc}") from exc
    flat[(flat < 0) & (flat >= -CLAMP_TOL)] = 0.0
    layouts = [gen.layout(l) for l in range(M + 1)]
    cuts = np.cumsum([lay.dim for lay in layouts])[:-1]
    z = np.split(flat, cuts)
    ss = SteadyState(M=M, z=z, R=[], layouts=layouts, mode=mode, cfg=cfg)
    ss.residual = float(np.abs(flat @ Q).max())
    return ss


# ---------------------------------------------------------------- truncation

def _scalar_measures(ss):
    from .measures import compute_measures
    rep = compute_measures(ss)
    return rep.comparable()


def _deltas(a: dict, b: dict) -> dict:
    out = {}
    for k in a:
        x, y = np.atleast_1d(a[k]), np.atleast_1d(b[k])
        n = max(x.size, y.size)
        x = np.pad(x, (0, n - x.size))
        y = np.pad(y, (0, n - y.size))
        d = np.abs(x - y)
        d[np.isnan(x) & np.isnan(y)] = 0.0
        out[k] = float(np.nanmax(np.where(np.isnan(d), np.inf, d)))
    return out


@dataclass
class TruncationReport:
    M: int
    eps: float
    tail_mass: float
    deltas: dict
    tried: list[int]


def _next_probe(probes, eps, M):
    """Next truncation probe from the geometric decay of the tail mass."""
    if len(probes) >= 2:
        (m1, t1), (m2, t2) = probes[-2], probes[-1]
        if 0 < t2 < t1:
            rho = (t2 / t1) ** (1.0 / (m2 - m1))
            step = math.ceil(math.log(eps / t2) / math.log(rho))
            return M + min(max(step, 1), M)
    return 2 * M


def choose_truncation(cfg: ModelConfig, eps: float = 1e-5, m_cap: int = 60,
                      mode: str = "lumped", gen: Generator | None = None,
                      m_start: int = 4) -> tuple[int, TruncationReport, dict]:
    """Smallest ``M`` whose solve is measure-stable and has negligible tail.

    ``M`` is accepted when every reported measure changes by at most ``eps``
    between the solves at ``M`` and ``M + 1`` and the mass on level ``M`` is
    at most ``eps``. Probes grow by extrapolating the tail-mass decay until
    one is accepted; the level profile of that solve then suggests a
    smaller candidate and bisection locates the boundary.
    The result is the smallest accepted ``M`` when acceptance is monotone
    in ``M``. Returns ``(M, report, solves)`` with the cached solves.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if m_cap < 1:
        raise ValueError("m_cap must be >= 1")
    gen = gen or Generator(cfg, mode)
    solves: dict[int, SteadyState] = {}
    measures: dict[int, dict] = {}
    verdicts: dict[int, bool] = {}
    last: dict = {}

    def get(M):
        if M not in solves:
            solves[M] = solve_fixed(cfg, M, gen=gen)
            measures[M] = _scalar_measures(solves[M])
        return solves[M]

    def ok(M):
        nonlocal last
        if M not in verdicts:
            tail = float(get(M).z[M].sum())
            d = _deltas(measures[M], measures[get(M + 1).M])
            last = {"M": M, "tail_mass": tail, **d}
            verdicts[M] = tail <= eps and all(v <= eps for v in d.values())
            log.debug("truncation probe M=%d tail=%.3e max delta=%.3e -> %s",
                      M, tail, max(d.values()), verdicts[M])
        return verdicts[M]

    def fail():
        raise NonConvergenceError(
            f"no truncation level <= M_cap={m_cap} meets eps={eps:g}", m_cap=m_cap, deltas=last)

    probes, lo = [], 0
    M = min(max(1, m_start), m_cap)
    while True:
        tail = float(get(M).z[M].sum())
        probes.append((M, tail))
        if tail <= eps and ok(M):
            break
        lo = max(lo, M)
        if M >= m_cap:
            fail()
        M = min(_next_probe(probes, eps, M) if tail > eps else M + 1, m_cap)
    hi = M
    # candidate from the level profile of the accepted solve
    prof = solves[hi].level_mass
    below = [m for m in range(lo + 1, hi) if prof[m] <= eps]
    c = below[0] if below else hi
    if c < hi:
        if ok(c):
            hi = c
        else:
            lo = c
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    ok(hi)
    report = TruncationReport(M=hi, eps=eps, tail_mass=float(solves[hi].z[hi].sum()),
                              deltas=_deltas(measures[hi], measures[hi + 1]), tried=sorted(solves))
    return hi, report, solves


def solve(cfg: ModelConfig, M: int | None = None, mode: str = "lumped",
          eps: float | None = None, m_cap: int | None = None) -> SteadyState:
    """Validate ``cfg`` and solve it, choosing ``M`` unless one is fixed."""
    require_valid(cfg)
    pol = cfg.truncation
    M = M if M is not None else pol.M
    gen = Generator(cfg, mode)
    if M is not None:
        return solve_fixed(cfg, M, gen=gen)
    eps = pol.eps if eps is None else eps
    m_cap = pol.m_cap if m_cap is None else m_cap
    M, report, solves = choose_truncation(cfg, eps, m_cap, mode, gen)
    ss = solves[M]
    ss.info["truncation"] = report
    return ss
