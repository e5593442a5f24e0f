"""Stationary performance measures of a solved truncated chain.

Every measure is a linear functional of the level vectors ``z(l)``. The
functionals are evaluated segment by segment: a ``(kappa, j)`` segment is
reshaped to ``(L, M_H**j, M_N**(kappa-j), W)`` and contracted against the
relevant rate vector (MMAP marks, service exit masses, orbit exit masses).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kron
from .errors import UndefinedMeasureError
from .model import fundamental_rates, retrial_mean_rate
from .states import OrbitSpace

SCALARS = ("P_d", "P_b", "E_H", "E_N", "E_orbit", "T_P", "P_preempt",
           "theta_r_succ", "P_leave_no_service", "P_orbit_join")
DISTRIBUTIONS = ("P_H", "P_N", "P_orbit")
MEASURES = SCALARS + DISTRIBUTIONS


class _Context:
    """Per-solve cache of rate vectors used by the functionals."""

    def __init__(self, ss):
        self.ss = ss
        cfg = ss.cfg
        self.cfg = cfg
        self.S = cfg.S
        self.L, self.M_H, self.M_N, self.N = cfg.dims
        m = cfg.mmap
        self.c_h = m.C_H.sum(axis=1)
        self.c_n = m.C_N.sum(axis=1)
        self.lambda_h, self.lambda_n, _ = fundamental_rates(m)
        self.orbit = OrbitSpace(cfg.retrial, ss.mode)
        self._exit_h, self._exit_n = {}, {}

    def exit_h(self, j):
        if j not in self._exit_h:
            self._exit_h[j] = kron.phi_service(self.cfg.service_h, j).sum(axis=1) if j else np.zeros(1)
        return self._exit_h[j]

    def exit_n(self, k):
        if k not in self._exit_n:
            self._exit_n[k] = kron.phi_service(self.cfg.service_n, k).sum(axis=1) if k else np.zeros(1)
        return self._exit_n[k]

    def segments(self):
        """Yield ``(level, kappa, j, block)`` with ``block`` of shape (L, H, N, W)."""
        ss = self.ss
        for l, zl in enumerate(ss.z):
            lay = ss.layouts[l]
            for kappa, j in lay.segments:
                seg = zl[lay.slice(kappa, j)]
                yield l, kappa, j, seg.reshape(
                    self.L, self.M_H ** j, self.M_N ** (kappa - j), lay.orbit_dim)


def _ctx(ss):
    ctx = ss.info.get("_measure_ctx")
    if ctx is None:
        ctx = ss.info["_measure_ctx"] = _Context(ss)
    return ctx


def _per_lambda(value, rate, what):
    if not rate > 0:
        raise UndefinedMeasureError(f"{what} is undefined when its arrival rate is 0")
    return value / rate


# ------------------------------------------------------------------ flows

def handoff_drop_flow(ss) -> float:
    c = _ctx(ss)
    return sum(float(b.sum(axis=(1, 2, 3)) @ c.c_h)
               for _, k, j, b in c.segments() if k == c.S and j == c.S)


def preemption_flow(ss) -> float:
    c = _ctx(ss)
    return sum(float(b.sum(axis=(1, 2, 3)) @ c.c_h)
               for _, k, j, b in c.segments() if k == c.S and j < c.S)


def orbit_join_flow(ss) -> float:
    """New-call arrivals finding every channel busy."""
    c = _ctx(ss)
    return sum(float(b.sum(axis=(1, 2, 3)) @ c.c_n)
               for _, k, _j, b in c.segments() if k == c.S)


def completion_flows(ss) -> tuple[float, float]:
    """Handoff and new-call service completion rates."""
    c = _ctx(ss)
    h = n = 0.0
    for _, k, j, b in c.segments():
        if j:
            h += float(b.sum(axis=(0, 2, 3)) @ c.exit_h(j))
        if k - j:
            n += float(b.sum(axis=(0, 1, 3)) @ c.exit_n(k - j))
    return h, n


def abandonment_flow(ss) -> float:
    c = _ctx(ss)
    return sum(float(b.sum(axis=(0, 1, 2)) @ c.orbit.leave_mass(l))
               for l, _k, _j, b in c.segments() if l)


def retrial_success_flow(ss) -> float:
    c = _ctx(ss)
    return sum(float(b.sum(axis=(0, 1, 2)) @ c.orbit.retry_mass(l))
               for l, k, _j, b in c.segments() if l and k < c.S)


def truncation_loss_flow(ss) -> float:
    """New calls discarded at the top level: blocked arrivals plus preempted calls."""
    c = _ctx(ss)
    top = ss.M
    out = 0.0
    for l, k, j, b in c.segments():
        if l != top or k != c.S:
            continue
        v = b.sum(axis=(1, 2, 3))
        out += float(v @ c.c_n)
        if j < c.S:
            out += float(v @ c.c_h)
    return out


def flows(ss) -> dict:
    """Stationary flow rates used by the conservation identities."""
    c = _ctx(ss)
    h, n = completion_flows(ss)
    return {
        "lambda_h": c.lambda_h,
        "lambda_n": c.lambda_n,
        "handoff_completion": h,
        "handoff_drop": handoff_drop_flow(ss),
        "new_completion": n,
        "abandonment": abandonment_flow(ss),
        "truncation_loss": truncation_loss_flow(ss),
        "preemption": preemption_flow(ss),
        "retrial_success": retrial_success_flow(ss),
    }


# --------------------------------------------------------------- measures

def dropping_probability(ss) -> float:
    """Fraction of handoff arrivals that find all channels held by handoff calls."""
    return _per_lambda(handoff_drop_flow(ss), _ctx(ss).lambda_h, "P_d")


def blocking_probability(ss) -> float:
    """New-call blocking read at orbit level ``M - 1``.

    The functional uses only the level one below the truncation level, so
    it depends on ``M`` and tends to zero as ``M`` grows.
    """
    c = _ctx(ss)
    lvl = ss.M - 1
    flow = sum(float(b.sum(axis=(1, 2, 3)) @ c.c_n)
               for l, k, _j, b in c.segments() if l == lvl and k == c.S)
    return _per_lambda(flow, c.lambda_n, "P_b")


def service_mix_distributions(ss):
    """Distributions of handoff and new calls in service with their means.

    Returns
    -------
    P_H, P_N : ndarray of shape (S + 1,)
    E_H, E_N : float
    """
    c = _ctx(ss)
    P_H = np.zeros(c.S + 1)
    P_N = np.zeros(c.S + 1)
    for _, k, j, b in c.segments():
        m = float(b.sum())
        P_H[j] += m
        P_N[k - j] += m
    idx = np.arange(c.S + 1)
    return P_H, P_N, float(idx[1:] @ P_H[1:]), float(idx[1:] @ P_N[1:])


def orbit_distribution(ss):
    """Orbit-size distribution over levels ``0..M`` and its mean."""
    P = np.array([zl.sum() for zl in ss.z])
    return P, float(np.arange(P.size) @ P)


def throughput(ss, literal: bool = False) -> float:
    """Service completion rate of both call types.

    With ``literal=True`` each state is weighted by ``j mu_H + (kappa-j) mu_N``
    (mean-rate approximation) instead of the phase-dependent exit mass.
    """
    if not literal:
        return sum(completion_flows(ss))
    from .model import ph_mean_rate
    c = _ctx(ss)
    mu_h, mu_n = ph_mean_rate(c.cfg.service_h), ph_mean_rate(c.cfg.service_n)
    return sum(float(b.sum()) * (j * mu_h + (k - j) * mu_n) for _, k, j, b in c.segments())


def preemption_probability(ss) -> float:
    return _per_lambda(preemption_flow(ss), _ctx(ss).lambda_h, "P_preempt")


def retrial_success_rate(ss) -> float:
    """Intensity of successful retrials, weighted by ``theta``.

    This is ``theta`` times the rate of retrial attempts that find an idle
    channel; the unweighted rate is :func:`retrial_success_flow`.
    """
    return retrial_mean_rate(ss.cfg.retrial) * retrial_success_flow(ss)


def leave_without_service_probability(ss) -> float:
    theta = retrial_mean_rate(ss.cfg.retrial)
    if not (theta > 0 and math.isfinite(theta)):
        raise UndefinedMeasureError("P_leave_no_service is undefined when theta is 0")
    return abandonment_flow(ss) / theta


def orbit_join_probability(ss) -> float:
    return _per_lambda(orbit_join_flow(ss), _ctx(ss).lambda_n, "P_orbit_join")


# ----------------------------------------------------------------- report

@dataclass
class MeasureReport:
    P_d: float
    P_b: float
    P_H: np.ndarray
    P_N: np.ndarray
    E_H: float
    E_N: float
    P_orbit: np.ndarray
    E_orbit: float
    T_P: float
    P_preempt: float
    theta_r_succ: float
    P_leave_no_service: float
    P_orbit_join: float
    M: int = 0
    T_P_literal: float = float("nan")
    theta_r_succ_flow: float = float("nan")
    extra: dict = field(default_factory=dict)

    def comparable(self) -> dict:
        """The thirteen measures keyed by name (arrays for distributions)."""
        return {k: getattr(self, k) for k in MEASURES}

    def flat(self) -> dict:
        """Flat ``name -> float`` mapping with indexed distribution entries."""
        out = {"M": self.M}
        for k in SCALARS:
            out[k] = float(getattr(self, k))
        out["T_P_literal"] = float(self.T_P_literal)
        out["theta_r_succ_flow"] = float(self.theta_r_succ_flow)
        for k in DISTRIBUTIONS:
            for i, v in enumerate(getattr(self, k)):
                out[f"{k}[{i}]"] = float(v)
        return out

    def to_json(self) -> str:
        clean = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                 for k, v in self.flat().items()}
        return json.dumps(clean, indent=2)

    def csv_row(self) -> str:
        buf = io.StringIO()
        flat = self.flat()
        csv.writer(buf, lineterminator="\n").writerows([flat.keys(), flat.values()])
        return buf.getvalue()


def _safe(fn, ss):
    try:
        return fn(ss)
    except UndefinedMeasureError:
        return float("nan")


def compute_measures(ss) -> MeasureReport:
    """All thirteen measures; undefined ratios are reported as NaN."""
    P_H, P_N, E_H, E_N = service_mix_distributions(ss)
    P_orbit, E_orbit = orbit_distribution(ss)
    return MeasureReport(
        P_d=_safe(dropping_probability, ss),
        P_b=_safe(blocking_probability, ss),
        P_H=P_H, P_N=P_N, E_H=E_H, E_N=E_N,
        P_orbit=P_orbit, E_orbit=E_orbit,
        T_P=throughput(ss),
        P_preempt=_safe(preemption_probability, ss),
        theta_r_succ=retrial_success_rate(ss),
        P_leave_no_service=_safe(leave_without_service_probability, ss),
        P_orbit_join=_safe(orbit_join_probability, ss),
        M=ss.M,
        T_P_literal=throughput(ss, literal=True),
        theta_r_succ_flow=retrial_success_flow(ss),
    )
