"""Channel allocation: the fewest channels ``S`` and a handoff rate ``lambda_H``
such that the dropping and preemption probabilities stay below tolerances.

Three heuristics share one memoised evaluator: a grid Direct Search, a
particle swarm (PSO) and simulated annealing (SA). PSO and SA minimise the
penalised objective

    F(S, lambda_H) = S + rho * (max(0, P_d - eps1)**2 + max(0, P_pre - eps2)**2)

optionally with a small bonus for larger ``lambda_H`` (``lambda_objective="max"``).
"""

from __future__ import annotations

import csv
import io
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonConvergenceError
from .measures import dropping_probability, preemption_probability
from .model import ModelConfig, with_targets
from .solver import solve

OBJECTIVES = ("max", "free")


@dataclass(frozen=True, eq=False)
class OptimizationProblem:
    """Constrained channel-allocation problem.

    Parameters
    ----------
    base : ModelConfig
        Every parameter except ``S`` and the handoff rate.
    eps1, eps2 : float
        Tolerances on ``P_d`` and ``P_preempt``.
    s_min, s_max : int
        Channel-count bounds.
    lambda_min, lambda_max : float
        Handoff-rate box.
    grid_step : float
        Direct Search grid spacing.
    penalty : float
        Quadratic penalty weight ``rho``.
    quantum : float
        Handoff rates are rounded to this resolution before solving; the
        evaluator memoises on ``(S, rounded rate)``.
    lambda_objective : {"max", "free"}
        ``"max"`` adds ``-0.5 * lambda_H / lambda_max`` to ``F`` so that,
        among points with equal ``S``, larger feasible rates win; ``"free"``
        leaves the rate unranked.
    """

    base: ModelConfig
    eps1: float = 1e-4
    eps2: float = 1e-4
    s_min: int = 2
    s_max: int = 6
    lambda_min: float = 0.01
    lambda_max: float = 2.0
    grid_step: float = 0.025
    penalty: float = 1e8
    quantum: float = 1e-3
    lambda_objective: str = "max"
    trunc_eps: float | None = None
    m_cap: int | None = None

    def __post_init__(self):
        bad = []
        if not (0 < self.eps1 and 0 < self.eps2):
            bad.append("eps1 and eps2 must be > 0")
        if not 1 <= self.s_min <= self.s_max:
            bad.append(f"need 1 <= s_min <= s_max, got {self.s_min}, {self.s_max}")
        if not 0 < self.lambda_min < self.lambda_max:
            bad.append("need 0 < lambda_min < lambda_max")
        if not self.grid_step > 0 or not self.quantum > 0:
            bad.append("grid_step and quantum must be > 0")
        if self.lambda_objective not in OBJECTIVES:
            bad.append(f"lambda_objective must be one of {OBJECTIVES}")
        if bad:
            raise ConfigError("invalid optimisation problem: " + "; ".join(bad), bad)

    @property
    def vacuous(self) -> bool:
        """Both tolerances are at least 1, so every point is feasible."""
        return self.eps1 >= 1 and self.eps2 >= 1


@dataclass
class OptimizationResult:
    method: str
    S: int | None
    lambda_h: float | None
    P_d: float
    P_preempt: float
    feasible: bool
    verified: bool
    iterations: int
    evaluations: int
    objective: float = math.nan
    info: dict = field(default_factory=dict)

    def row(self, mu_h: float | None = None) -> list:
        """Table-shaped row: mu_H, S*, lambda_H*, P_d*, P_preempt*, iterations."""
        return [mu_h, self.S, self.lambda_h, self.P_d, self.P_preempt, self.iterations]


class Evaluator:
    """Memoised ``(S, lambda_H) -> (P_d, P_preempt)``; safe to share between threads."""

    def __init__(self, problem: OptimizationProblem):
        self.problem = problem
        self._memo: dict = {}
        self._m_hint: dict = {}
        self._lock = threading.Lock()
        self.solves = 0

    def quantize(self, lam: float) -> float:
        """Round to the quantum grid, then clip into the rate box."""
        p = self.problem
        q = round(round(float(lam) / p.quantum) * p.quantum, 12)
        return min(max(q, p.lambda_min), p.lambda_max)

    def config(self, S: int, lam: float) -> ModelConfig:
        return with_targets(self.problem.base, lambda_h=lam).replace(S=int(S))

    def fresh(self, S: int, lam: float) -> tuple[float, float]:
        """Solve without the memo (used to re-verify reported optima)."""
        from .solver import choose_truncation
        p = self.problem
        cfg = self.config(S, lam)
        pol = cfg.truncation
        eps = p.trunc_eps if p.trunc_eps is not None else pol.eps
        m_cap = p.m_cap if p.m_cap is not None else pol.m_cap
        try:
            if pol.M is not None:
                ss = solve(cfg, M=pol.M)
            else:
                M, _, solves = choose_truncation(cfg, eps, m_cap,
                                                 m_start=self._m_hint.get(int(S), 4))
                ss = solves[M]
                self._m_hint[int(S)] = M
        except NonConvergenceError as exc:
            exc.args = (f"{exc.args[0]} at S={S}, lambda_h={lam}",)
            raise
        with self._lock:
            self.solves += 1
        return dropping_probability(ss), preemption_probability(ss)

    def __call__(self, S: int, lam: float) -> tuple[float, float]:
        key = (int(S), self.quantize(lam))
        hit = self._memo.get(key)
        if hit is None:
            hit = self.fresh(*key)
            with self._lock:
                self._memo.setdefault(key, hit)
        return hit

    def violation(self, S, lam) -> tuple[float, float, float]:
        """``(P_d, P_preempt, penalty)``; vacuous problems skip the solve."""
        p = self.problem
        if p.vacuous:
            return math.nan, math.nan, 0.0
        pd, pp = self(S, lam)
        pen = p.penalty * (max(0.0, pd - p.eps1) ** 2 + max(0.0, pp - p.eps2) ** 2)
        return pd, pp, pen

    def objective(self, S, lam) -> tuple[float, bool]:
        p = self.problem
        _, _, pen = self.violation(S, lam)
        f = S + pen
        if p.lambda_objective == "max":
            f -= 0.5 * lam / p.lambda_max
        return f, pen == 0.0


def evaluate(problem: OptimizationProblem, S: int, lambda_h: float) -> tuple[float, float]:
    """``(P_d, P_preempt)`` at one point (fresh solve)."""
    return Evaluator(problem).fresh(S, lambda_h)


def _finish(method, ev: Evaluator, s0, S, lam, feasible, iterations, objective=math.nan, **info):
    """Re-verify at the reported point; ``s0`` is the solve count at the start."""
    p = ev.problem
    objective = float(objective)
    if S is None:
        return OptimizationResult(method, None, None, math.nan, math.nan, False, False,
                                  iterations, ev.solves - s0, objective, info)
    n = ev.solves - s0
    pd, pp = ev.fresh(S, lam)
    verified = pd <= p.eps1 and pp <= p.eps2
    return OptimizationResult(method, int(S), float(lam), pd, pp, bool(feasible), bool(verified),
                              iterations, n, objective, info)


# ------------------------------------------------------------ direct search

def _boundary(ev, S, grid, which):
    """Largest grid rate before the first violation of one constraint."""
    p = ev.problem
    eps = p.eps1 if which == 0 else p.eps2
    if eps >= 1:
        return grid[-1], len(grid)
    last = None
    for n, lam in enumerate(grid, 1):
        if ev(S, lam)[which] > eps:
            return last, n
        last = lam
    return last, len(grid)


def direct_search(problem: OptimizationProblem, coincidence: int | None = 0,
                  evaluator: Evaluator | None = None) -> OptimizationResult:
    """Grid Direct Search over ``S = s_min, s_min + 1, ...``.

    For each ``S`` the grid ``k * grid_step`` (clipped to the rate box) is
    scanned upward to the last rate before ``P_d`` first exceeds ``eps1``
    (``lambda1``) and likewise for ``P_preempt`` (``lambda2``). ``S`` is
    accepted when both exist and lie within ``coincidence`` grid steps of
    each other; the reported rate is ``min(lambda1, lambda2)``. With
    ``coincidence=None`` any ``S`` with both boundaries present is accepted,
    which makes ``S*`` the smallest channel count with a feasible grid rate.
    """
    ev = evaluator or Evaluator(problem)
    s0 = ev.solves
    p = problem
    k0 = max(1, math.ceil(p.lambda_min / p.grid_step - 1e-9))
    k1 = math.floor(p.lambda_max / p.grid_step + 1e-9)
    grid = [round(k * p.grid_step, 12) for k in range(k0, k1 + 1)]
    if not grid:
        raise ConfigError("Direct Search grid is empty for this rate box")
    scans = {}
    iterations = 0
    for S in range(p.s_min, p.s_max + 1):
        iterations += 1
        l1, _ = _boundary(ev, S, grid, 0)
        l2, _ = _boundary(ev, S, grid, 1)
        scans[S] = (l1, l2)
        if l1 is None or l2 is None:
            continue
        if coincidence is None or abs(l1 - l2) <= coincidence * p.grid_step + 1e-12:
            return _finish("DS", ev, s0, S, min(l1, l2), True, iterations, S, scans=scans)
    return _finish("DS", ev, s0, None, None, False, iterations, scans=scans)


# --------------------------------------------------------------------- PSO

def _box(p):
    lo = np.array([p.s_min - 1.0, p.lambda_min])
    hi = np.array([float(p.s_max), p.lambda_max])
    return lo, hi


def _decode(p, x):
    S = int(min(max(math.ceil(x[0] - 1e-12), p.s_min), p.s_max))
    return S, float(x[1])


def pso(problem: OptimizationProblem, swarm: int = 60, w_max: float = 0.9, w_min: float = 0.4,
        c1: float = 2.0, c2: float = 2.0, maxite: int = 200, seed: int = 0, stall: int = 100,
        tol: float = 1e-6, evaluator: Evaluator | None = None) -> OptimizationResult:
    """Particle swarm on the penalised objective.

    ``S`` is a continuous coordinate rounded up on evaluation; inertia
    decays linearly from ``w_max`` to ``w_min`` over ``maxite`` iterations;
    velocities are clamped to half the box width. The run stops after
    ``maxite`` iterations or once the global best has not improved by
    more than ``tol`` for ``stall`` consecutive iterations.
    """
    if swarm < 2 or maxite < 1 or stall < 1:
        raise ValueError("need swarm >= 2, maxite >= 1, stall >= 1")
    if not (0 <= w_min <= w_max) or c1 < 0 or c2 < 0:
        raise ValueError("invalid PSO coefficients")
    ev = evaluator or Evaluator(problem)
    s0 = ev.solves
    p = problem
    rng = np.random.default_rng(seed)
    lo, hi = _box(p)
    vmax = 0.5 * (hi - lo)
    x = lo + rng.random((swarm, 2)) * (hi - lo)
    v = (rng.random((swarm, 2)) * 2 - 1) * vmax

    def score(xi):
        return ev.objective(*_decode(p, xi))

    f = np.empty(swarm)
    feas = np.zeros(swarm, bool)
    for i in range(swarm):
        f[i], feas[i] = score(x[i])
    pbest, pbest_f = x.copy(), f.copy()
    g = int(np.argmin(f))
    gbest, gbest_f = x[g].copy(), f[g]
    best_feas = (f[feas].min(), x[feas][np.argmin(f[feas])].copy()) if feas.any() else None
    quiet = 0
    it = 0
    for it in range(1, maxite + 1):
        w = w_max - (w_max - w_min) * (it - 1) / max(maxite - 1, 1)
        u1, u2 = rng.random((swarm, 2)), rng.random((swarm, 2))
        v = w * v + c1 * u1 * (pbest - x) + c2 * u2 * (gbest - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)
        before = gbest_f
        for i in range(swarm):
            fi, ok = score(x[i])
            if fi < pbest_f[i]:
                pbest[i], pbest_f[i] = x[i], fi
            if fi < gbest_f:
                gbest, gbest_f = x[i].copy(), fi
            if ok and (best_feas is None or fi < best_feas[0]):
                best_feas = (fi, x[i].copy())
        quiet = quiet + 1 if before - gbest_f <= tol else 0
        if quiet >= stall:
            break
    if best_feas is not None:
        S, lam = _decode(p, best_feas[1])
        return _finish("PSO", ev, s0, S, ev.quantize(lam), True, it, best_feas[0])
    S, lam = _decode(p, gbest)
    res = _finish("PSO", ev, s0, S, ev.quantize(lam), False, it, gbest_f)
    return res


# ---------------------------------------------------------------------- SA

def simulated_annealing(problem: OptimizationProblem, alpha: float = 0.95, epoch: int = 50,
                        step: float = 0.1, seed: int = 0, t0_samples: int = 20,
                        min_epochs: int = 5, max_epochs: int = 200, tol: float = 1e-6,
                        evaluator: Evaluator | None = None) -> OptimizationResult:
    """Metropolis simulated annealing on the penalised objective.

    A proposal moves ``S`` by +-1 with probability 1/2 and adds a Gaussian
    step of standard deviation ``step * (lambda_max - lambda_min)`` to the
    rate, reflected into the box. ``T0`` is the mean ``|F|`` over
    ``t0_samples`` random points; ``T`` is multiplied by ``alpha`` after
    every epoch of ``epoch`` proposals. The run stops when an epoch improves
    the best value by less than ``tol`` (after ``min_epochs``) or after
    ``max_epochs``. ``iterations`` counts proposals.
    """
    if not 0 < alpha < 1:
        raise ValueError("cooling rate must lie in (0, 1)")
    if epoch < 1 or step <= 0 or t0_samples < 1 or max_epochs < 1:
        raise ValueError("invalid SA hyperparameters")
    ev = evaluator or Evaluator(problem)
    s0 = ev.solves
    p = problem
    rng = np.random.default_rng(seed)
    width = p.lambda_max - p.lambda_min

    def rand_point():
        return int(rng.integers(p.s_min, p.s_max + 1)), p.lambda_min + rng.random() * width

    def F(S, lam):
        return ev.objective(S, ev.quantize(lam))

    T = float(np.mean([abs(F(*rand_point())[0]) for _ in range(t0_samples)]))
    T = max(T, 1e-12)
    S, lam = rand_point()
    f, ok = F(S, lam)
    best = (f, S, lam, ok)
    best_feas = (f, S, lam) if ok else None
    proposals = 0
    for ep in range(1, max_epochs + 1):
        start_best = best[0]
        for _ in range(epoch):
            proposals += 1
            S2 = S
            if rng.random() < 0.5:
                S2 = S + (1 if rng.random() < 0.5 else -1)
                S2 = min(max(S2, p.s_min), p.s_max)
            lam2 = lam + rng.normal(0.0, step * width)
            while not p.lambda_min <= lam2 <= p.lambda_max:
                lam2 = 2 * p.lambda_min - lam2 if lam2 < p.lambda_min else 2 * p.lambda_max - lam2
            f2, ok2 = F(S2, lam2)
            d = f2 - f
            if d <= 0 or rng.random() < math.exp(-d / T):
                S, lam, f, ok = S2, lam2, f2, ok2
                if f < best[0]:
                    best = (f, S, lam, ok)
                if ok and (best_feas is None or f < best_feas[0]):
                    best_feas = (f, S, lam)
        T *= alpha
        if ep >= min_epochs and start_best - best[0] < tol:
            break
    if best_feas is not None:
        f, S, lam = best_feas
        return _finish("SA", ev, s0, S, ev.quantize(lam), True, proposals, f)
    f, S, lam, _ = best
    return _finish("SA", ev, s0, S, ev.quantize(lam), False, proposals, f)


def results_csv(rows, header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "mu_h", "S", "lambda_h", "P_d", "P_preempt", "iterations",
                "evaluations", "feasible", "verified"))
    for method, mu_h, r in rows:
        w.writerow([method, mu_h, r.S, r.lambda_h, r.P_d, r.P_preempt, r.iterations,
                    r.evaluations, r.feasible, r.verified])
    return buf.getvalue()
