"""Discrete-event simulation of the retrial queue, used as an independent oracle.

The simulator works from the primitive rate matrices only. It keeps the
MMAP phase, one ``(class, phase)`` pair per channel and the list of orbit
customers' retrial phases, and advances by competing exponentials. It does
not truncate the orbit.

Randomness comes from a Philox counter-based generator. Each event consumes
exactly five uniforms (holding time, event choice, two initial-phase draws
and a victim draw read only under uniform preemption), generated in
fixed-size chunks, so a seed and a config determine the trajectory.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import ModelConfig, require_valid, retrial_mean_rate, with_targets

U_PER_EVENT = 5
CHUNK = 1 << 16
ORBIT_CAPACITY = 1 << 20

# counter slots
ARR_H, ARR_N, DROP, PREEMPT, JOIN, JOIN_AT_B, COMP_H, COMP_N, ABANDON, SUCC, FAIL = range(11)
N_COUNTERS = 11
COUNTER_NAMES = ("handoff_arrivals", "new_arrivals", "drops", "preemptions", "orbit_joins",
                 "joins_at_b_level", "handoff_completions", "new_completions", "abandonments",
                 "retrial_successes", "retrial_failures")


@njit(cache=True)
def _pick(cum, x):
    n = cum.shape[0]
    for i in range(n):
        if x < cum[i]:
            return i
    # rounding at the top end: last positive-rate entry
    for i in range(n - 1, -1, -1):
        if cum[i] > (cum[i - 1] if i > 0 else 0.0):
            return i
    return n - 1


@njit(cache=True)
def _free(cls):
    for c in range(cls.shape[0]):
        if cls[c] == 0:
            return c
    return -1


@njit(cache=True)
def _run(U, st, cls, ph, start, orb, mm_cum, mm_tot, h_cum, h_tot, n_cum, n_tot, r_cum, r_tot,
         bh_cum, bn_cum, g_cum, L, MH, NR, level_b, uniform_victim, occ, cnt):
    """Advance ``U.shape[0]`` events; returns 0, or -1 on absorption, -2 on orbit overflow.

    ``st`` holds (MMAP phase, orbit size, new-call start sequence number);
    ``start[c]`` is the sequence number of the new call on channel ``c``.

    ``occ`` layout: total time, time by handoff count (S+1), time by new
    count (S+1), time by orbit size (nbins, last bin is overflow).
    """
    S = cls.shape[0]
    nbins = occ.shape[0] - 1 - 2 * (S + 1)
    for it in range(U.shape[0]):
        v = st[0]
        no = st[1]
        R = mm_tot[v]
        nh = 0
        nn = 0
        for c in range(S):
            if cls[c] == 1:
                R += h_tot[ph[c]]
                nh += 1
            elif cls[c] == 2:
                R += n_tot[ph[c]]
                nn += 1
        for i in range(no):
            R += r_tot[orb[i]]
        if R <= 0.0:
            return -1
        dt = -math.log1p(-U[it, 0]) / R
        occ[0] += dt
        occ[1 + nh] += dt
        occ[2 + S + nn] += dt
        occ[3 + 2 * S + min(no, nbins - 1)] += dt
        x = U[it, 1] * R
        if x >= R:
            x = R * (1.0 - 1e-16)

        if x < mm_tot[v]:
            e = _pick(mm_cum[v], x)
            kind = e // L
            st[0] = e % L
            if kind == 1:
                cnt[ARR_N] += 1
                c = _free(cls)
                if c >= 0:
                    cls[c] = 2
                    ph[c] = _pick(bn_cum, U[it, 2])
                    start[c] = st[2]
                    st[2] += 1
                else:
                    cnt[JOIN] += 1
                    if no == level_b:
                        cnt[JOIN_AT_B] += 1
                    if no >= orb.shape[0]:
                        return -2
                    orb[no] = _pick(g_cum, U[it, 2])
                    st[1] = no + 1
            elif kind == 2:
                cnt[ARR_H] += 1
                c = _free(cls)
                if c >= 0:
                    cls[c] = 1
                    ph[c] = _pick(bh_cum, U[it, 2])
                elif nn > 0:
                    if uniform_victim:
                        target = min(int(U[it, 4] * nn), nn - 1)
                        seen = 0
                        for c2 in range(S):
                            if cls[c2] == 2:
                                if seen == target:
                                    c = c2
                                    break
                                seen += 1
                    else:
                        newest = -1
                        for c2 in range(S):
                            if cls[c2] == 2 and start[c2] > newest:
                                newest = start[c2]
                                c = c2
                    cls[c] = 1
                    ph[c] = _pick(bh_cum, U[it, 2])
                    if no >= orb.shape[0]:
                        return -2
                    orb[no] = _pick(g_cum, U[it, 3])
                    st[1] = no + 1
                    cnt[PREEMPT] += 1
                else:
                    cnt[DROP] += 1
            continue
        x -= mm_tot[v]

        done = False
        last_c = -1
        for c in range(S):
            if cls[c] == 0:
                continue
            last_c = c
            tot = h_tot[ph[c]] if cls[c] == 1 else n_tot[ph[c]]
            if x < tot:
                done = True
                break
            x -= tot
        if done or (no == 0 and last_c >= 0):
            c = last_c
            if cls[c] == 1:
                e = _pick(h_cum[ph[c]], x)
                if e < MH:
                    ph[c] = e
                else:
                    cls[c] = 0
                    cnt[COMP_H] += 1
            else:
                e = _pick(n_cum[ph[c]], x)
                if e < n_cum.shape[1] - 1:
                    ph[c] = e
                else:
                    cls[c] = 0
                    cnt[COMP_N] += 1
            continue

        i = no - 1
        for k in range(no):
            tot = r_tot[orb[k]]
            if x < tot:
                i = k
                break
            x -= tot
        e = _pick(r_cum[orb[i]], x)
        if e < NR:
            orb[i] = e
        elif e == NR:
            orb[i] = orb[no - 1]
            st[1] = no - 1
            cnt[ABANDON] += 1
        else:
            c = _free(cls)
            if c >= 0:
                orb[i] = orb[no - 1]
                st[1] = no - 1
                cls[c] = 2
                ph[c] = _pick(bn_cum, U[it, 2])
                start[c] = st[2]
                st[2] += 1
                cnt[SUCC] += 1
            else:
                orb[i] = _pick(g_cum, U[it, 2])
                cnt[FAIL] += 1
    return 0


def _cum_rows(M):
    return np.ascontiguousarray(np.cumsum(M, axis=1))


def _tables(cfg: ModelConfig):
    m = cfg.mmap
    C0 = np.array(m.C0)
    np.fill_diagonal(C0, 0.0)
    mm = np.hstack([C0, m.C_N, m.C_H])
    A_h = np.array(cfg.service_h.A)
    np.fill_diagonal(A_h, 0.0)
    A_n = np.array(cfg.service_n.A)
    np.fill_diagonal(A_n, 0.0)
    G = np.array(cfg.retrial.Gamma)
    np.fill_diagonal(G, 0.0)
    h = np.hstack([A_h, cfg.service_h.A0.reshape(-1, 1)])
    n = np.hstack([A_n, cfg.service_n.A0.reshape(-1, 1)])
    r = np.hstack([G, cfg.retrial.exit_leave.reshape(-1, 1), cfg.retrial.exit_retry.reshape(-1, 1)])
    if min(mm.min(), h.min(), r.min(), n.min()) < 0:
        raise ValueError("off-diagonal rates must be nonnegative")
    out = {}
    for name, M in (("mm", mm), ("h", h), ("n", n), ("r", r)):
        cum = _cum_rows(M)
        out[name + "_cum"] = cum
        out[name + "_tot"] = np.ascontiguousarray(cum[:, -1])
    for name, vec in (("bh", cfg.service_h.beta), ("bn", cfg.service_n.beta),
                      ("g", cfg.retrial.gamma)):
        cum = np.cumsum(vec)
        out[name + "_cum"] = cum / cum[-1]
    return out


@dataclass
class SimState:
    """Mutable trajectory state between kernel calls."""

    v: int
    channel_class: np.ndarray  # 0 idle, 1 handoff, 2 new call
    channel_phase: np.ndarray
    orbit: np.ndarray
    orbit_size: int
    counters: np.ndarray = field(default_factory=lambda: np.zeros(N_COUNTERS, dtype=np.int64))

    @property
    def new_in_service(self) -> int:
        return int((self.channel_class == 2).sum())


@dataclass
class SimEstimate:
    estimate: dict
    stderr: dict
    events: int
    seed: int
    batches: int
    counters: dict
    final_state: SimState | None = None

    def z_scores(self, reference: dict) -> dict:
        """``|estimate - reference| / stderr`` for every shared key."""
        out = {}
        for k, ref in reference.items():
            if k not in self.estimate or ref is None or not np.isfinite(ref):
                continue
            d = abs(self.estimate[k] - ref)
            se = self.stderr[k]
            out[k] = 0.0 if d == 0 else (d / se if se > 0 else math.inf)
        return out

    def rows(self, param="") -> list[tuple]:
        return [(param, k, self.estimate[k], self.stderr[k], self.events, self.seed)
                for k in self.estimate]


def _batch_values(occ, cnt, S, theta, nbins):
    """Per-batch measure values from one batch's accumulators."""
    T = occ[0]
    vals = {}

    def ratio(num, den):
        return cnt[num] / cnt[den] if cnt[den] else math.nan

    vals["P_d"] = ratio(DROP, ARR_H)
    vals["P_b"] = ratio(JOIN_AT_B, ARR_N)
    P_H = occ[1:2 + S] / T
    P_N = occ[2 + S:3 + 2 * S] / T
    P_orb = occ[3 + 2 * S:3 + 2 * S + nbins] / T
    idx = np.arange(S + 1)
    vals["E_H"] = float(idx @ P_H)
    vals["E_N"] = float(idx @ P_N)
    vals["E_orbit"] = float(np.arange(nbins) @ P_orb)
    vals["T_P"] = (cnt[COMP_H] + cnt[COMP_N]) / T
    vals["P_preempt"] = ratio(PREEMPT, ARR_H)
    vals["theta_r_succ"] = theta * cnt[SUCC] / T
    vals["theta_r_succ_flow"] = cnt[SUCC] / T
    vals["P_leave_no_service"] = cnt[ABANDON] / T / theta if theta > 0 else math.nan
    vals["P_orbit_join"] = ratio(JOIN, ARR_N)
    for name, arr in (("P_H", P_H), ("P_N", P_N), ("P_orbit", P_orb)):
        for i, x in enumerate(arr):
            vals[f"{name}[{i}]"] = float(x)
    return vals


_RATIO_COUNTS = {"P_d": (DROP, ARR_H), "P_preempt": (PREEMPT, ARR_H),
                 "P_orbit_join": (JOIN, ARR_N), "P_b": (JOIN_AT_B, ARR_N)}


def simulate(cfg: ModelConfig, events: int = 1_000_000, seed: int = 0, warmup: float = 0.2,
             batches: int = 20, M: int | None = None, orbit_bins: int | None = None,
             victim: str = "newest") -> SimEstimate:
    """Batch-means estimates of every measure.

    Parameters
    ----------
    cfg : ModelConfig
    events : int
        Total number of events including warmup; at least ``10**4``.
    seed : int
        Philox key; equal seeds give identical trajectories.
    warmup : float
        Fraction of events discarded before the first batch.
    batches : int
        Number of equal-length (in events) batches after warmup.
    M : int, optional
        Truncation level of the solve being compared against. The
        blocking probability counts arrivals that join an orbit of size
        ``M - 1``, and the orbit histogram has ``M + 1`` bins with the last
        one collecting every larger size.
    orbit_bins : int, optional
        Histogram size when ``M`` is not given (default 64).
    victim : {"newest", "uniform"}
        Which new call a handoff evicts when every channel is busy. The
        generator evicts the most recently started one; ``"uniform"``
        picks uniformly among new calls in service.

    Returns
    -------
    SimEstimate
        Point estimates are batch means; a ratio measure whose numerator
        count is zero over the whole run gets a standard error of
        ``1 / denominator count``, and distribution entries (time
        fractions) get at least ``1 / post-warmup events``. Both floors are
        the resolution of the estimate.
    """
    require_valid(cfg)
    if int(events) != events or events < 10_000:
        raise ValueError("events must be an integer >= 1e4")
    if not 0 <= warmup < 1:
        raise ValueError("warmup must lie in [0, 1)")
    if batches < 2:
        raise ValueError("need at least 2 batches")
    if int(seed) != seed or seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    if victim not in ("newest", "uniform"):
        raise ValueError("victim must be 'newest' or 'uniform'")
    S = cfg.S
    L = cfg.mmap.L
    nbins = (M + 1) if M is not None else (orbit_bins or 64)
    level_b = (M - 1) if M is not None else -1
    theta = retrial_mean_rate(cfg.retrial)
    tb = _tables(cfg)
    rng = np.random.Generator(np.random.Philox(int(seed)))

    from .model import stationary_vector
    pi = stationary_vector(cfg.mmap)
    st = np.array([int(np.searchsorted(np.cumsum(pi), rng.random() * pi.sum(), side="right")), 0, 0],
                  dtype=np.int64)
    st[0] = min(st[0], L - 1)
    cls = np.zeros(S, dtype=np.int64)
    ph = np.zeros(S, dtype=np.int64)
    start = np.zeros(S, dtype=np.int64)
    orb = np.zeros(ORBIT_CAPACITY, dtype=np.int64)
    total_cnt = np.zeros(N_COUNTERS, dtype=np.int64)
    occ_size = 1 + 2 * (S + 1) + nbins

    def advance(n):
        occ = np.zeros(occ_size)
        cnt = np.zeros(N_COUNTERS, dtype=np.int64)
        left = n
        while left:
            k = min(left, CHUNK)
            U = rng.random((k, U_PER_EVENT))
            code = _run(U, st, cls, ph, start, orb, tb["mm_cum"], tb["mm_tot"], tb["h_cum"], tb["h_tot"],
                        tb["n_cum"], tb["n_tot"], tb["r_cum"], tb["r_tot"], tb["bh_cum"],
                        tb["bn_cum"], tb["g_cum"], L, cfg.service_h.M, cfg.retrial.N, level_b,
                        victim == "uniform", occ, cnt)
            if code == -1:
                raise RuntimeError("simulation reached a state with zero total event rate")
            if code == -2:
                raise RuntimeError(f"orbit exceeded {ORBIT_CAPACITY} customers; the system "
                                   "looks unstable for this configuration")
            left -= k
        total_cnt[:] += cnt
        return occ, cnt

    n_warm = int(round(warmup * events))
    per_batch = (events - n_warm) // batches
    if per_batch < 1:
        raise ValueError("too few events per batch")
    advance(n_warm + (events - n_warm - per_batch * batches))
    batch_vals = []
    batch_cnt = np.zeros(N_COUNTERS, dtype=np.int64)
    for _ in range(batches):
        occ, cnt = advance(per_batch)
        batch_cnt += cnt
        batch_vals.append(_batch_values(occ, cnt, S, theta, nbins))

    est, se = {}, {}
    for k in batch_vals[0]:
        x = np.array([b[k] for b in batch_vals], dtype=float)
        x = x[np.isfinite(x)]
        if x.size == 0:
            est[k], se[k] = math.nan, math.nan
            continue
        est[k] = float(x.mean())
        se[k] = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
        if k.startswith(("P_H[", "P_N[", "P_orbit[")):
            # a time fraction cannot be resolved below one event in the run
            se[k] = max(se[k], 1.0 / (per_batch * batches))
        if k in _RATIO_COUNTS:
            num, den = _RATIO_COUNTS[k]
            if batch_cnt[num] == 0 and batch_cnt[den] > 0:
                se[k] = max(se[k], 1.0 / batch_cnt[den])
    state = SimState(int(st[0]), cls.copy(), ph.copy(), orb[:st[1]].copy(), int(st[1]),
                     total_cnt.copy())
    return SimEstimate(est, se, int(events), int(seed), batches,
                       dict(zip(COUNTER_NAMES, (int(c) for c in total_cnt))), state)


SWEEP_AXES = ("S",) + ("lambda_h", "lambda_n", "mu_h", "mu_n", "theta")


def retarget(cfg: ModelConfig, axis: str, value) -> ModelConfig:
    if axis == "S":
        return cfg.replace(S=int(value))
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return with_targets(cfg, **{axis: float(value)})


def trend_sweep(cfg: ModelConfig, axis: str, grid, events: int = 200_000, seed: int = 0,
                **kw) -> list[tuple[float, SimEstimate]]:
    """One simulation per grid point with a shared seed (common random numbers)."""
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be nonempty")
    return [(x, simulate(retarget(cfg, axis, x), events, seed, **kw)) for x in grid]


def estimates_csv(rows, header: str | None = None) -> str:
    """CSV with columns ``param, measure, estimate, stderr, events, seed``."""
    buf = io.StringIO()
    if header:
        buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("param", "measure", "estimate", "stderr", "events", "seed"))
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()
