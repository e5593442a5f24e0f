"""Stochastic ingredients of the MMAP[2]/PH[2]/S retrial queue.

Arrivals follow a marked Markovian arrival process with two marks (new and
handoff calls), both call classes have phase-type service times, and orbit
customers wait a phase-type time that ends either in a retrial attempt or
in abandonment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, IrreducibilityError

GENERATOR_TOL = 1e-9
PH_TOL = 1e-12


def _frozen(a, ndim):
    arr = np.array(a, dtype=float)
    if ndim == 1:
        arr = arr.reshape(-1)
    elif arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if ndim == 2 else arr
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarkedMAP:
    """Two-mark MAP given by ``C0`` (no arrival), ``C_N`` (new call) and
    ``C_H`` (handoff call)."""

    C0: np.ndarray
    C_N: np.ndarray
    C_H: np.ndarray

    def __post_init__(self):
        for name in ("C0", "C_N", "C_H"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        shapes = {self.C0.shape, self.C_N.shape, self.C_H.shape}
        if len(shapes) != 1 or self.C0.shape[0] != self.C0.shape[1]:
            raise ConfigError(f"MMAP matrices must be square and conformable, got {sorted(shapes)}")

    @property
    def L(self) -> int:
        return self.C0.shape[0]

    @property
    def C(self) -> np.ndarray:
        return self.C0 + self.C_N + self.C_H

    def renormalized(self) -> "MarkedMAP":
        """Reset the diagonal of ``C0`` so that ``C0 + C_N + C_H`` has exact
        zero row sums."""
        C0 = np.array(self.C0)
        np.fill_diagonal(C0, 0.0)
        np.fill_diagonal(C0, -(C0.sum(1) + self.C_N.sum(1) + self.C_H.sum(1)))
        return MarkedMAP(C0, self.C_N, self.C_H)


@dataclass(frozen=True, eq=False)
class PhaseType:
    """PH distribution with initial vector ``beta`` and sub-generator ``A``."""

    beta: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta, 1))
        object.__setattr__(self, "A", _frozen(self.A, 2))
        if self.A.shape != (self.beta.size, self.beta.size):
            raise ConfigError(f"PH shapes disagree: beta {self.beta.shape}, A {self.A.shape}")

    @property
    def M(self) -> int:
        return self.beta.size

    @property
    def A0(self) -> np.ndarray:
        """Exit-rate column, ``-A e``."""
        return -self.A.sum(axis=1)


@dataclass(frozen=True, eq=False)
class RetrialPH:
    """Retrial time law with two absorbing exits.

    ``exit_leave`` is the rate of leaving the orbit without service and
    ``exit_retry`` the rate of a retrial attempt; ``Gamma e + exit_leave +
    exit_retry = 0``.
    """

    gamma: np.ndarray
    Gamma: np.ndarray
    exit_leave: np.ndarray
    exit_retry: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", _frozen(self.gamma, 1))
        object.__setattr__(self, "Gamma", _frozen(self.Gamma, 2))
        object.__setattr__(self, "exit_leave", _frozen(self.exit_leave, 1))
        object.__setattr__(self, "exit_retry", _frozen(self.exit_retry, 1))
        n = self.gamma.size
        if (self.Gamma.shape != (n, n) or self.exit_leave.size != n
                or self.exit_retry.size != n):
            raise ConfigError("retrial PH shapes disagree")

    @property
    def N(self) -> int:
        return self.gamma.size


@dataclass(frozen=True)
class TruncationPolicy:
    """Either a fixed orbit cap ``M`` or an eps-driven choice bounded by ``m_cap``."""

    M: int | None = None
    eps: float = 1e-5
    m_cap: int = 60


@dataclass(frozen=True, eq=False)
class ModelConfig:
    mmap: MarkedMAP
    service_h: PhaseType
    service_n: PhaseType
    retrial: RetrialPH
    S: int
    truncation: TruncationPolicy = field(default_factory=TruncationPolicy)
    row_sum_tol: float = GENERATOR_TOL

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def dims(self):
        """(L, M_H, M_N, N)."""
        return self.mmap.L, self.service_h.M, self.service_n.M, self.retrial.N


# ---------------------------------------------------------------- operations

def _communicating_classes(C):
    adj = (np.abs(C) > 0).astype(int)
    np.fill_diagonal(adj, 0)
    n, labels = connected_components(adj, directed=True, connection="strong")
    return [np.flatnonzero(labels == k).tolist() for k in range(n)]


def ctmc_stationary(Q: np.ndarray) -> np.ndarray:
    """Stationary row vector of a small irreducible generator.

    One balance equation is replaced by the normalisation ``x e = 1``; the
    resulting square system is nonsingular iff the stationary law is unique.
    """
    n = Q.shape[0]
    B = np.array(Q, dtype=float)
    B[:, -1] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        lu, piv = linalg.lu_factor(B.T, check_finite=True)
    except ValueError as exc:
        raise ConfigError(f"non-finite generator: {exc}") from exc
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise IrreducibilityError("generator has no unique stationary vector")
    return linalg.lu_solve((lu, piv), rhs)


def stationary_vector(m: MarkedMAP) -> np.ndarray:
    """Stationary vector ``pi`` of the MMAP phase process, ``pi C = 0``."""
    C = m.C
    classes = _communicating_classes(C)
    if len(classes) > 1:
        raise IrreducibilityError(
            f"MMAP phase generator is reducible; communicating classes {classes}",
            classes=classes)
    return ctmc_stationary(C)


def fundamental_rates(m: MarkedMAP) -> tuple[float, float, float]:
    """Return ``(lambda_H, lambda_N, lambda)``."""
    pi = stationary_vector(m)
    lam_h = float(pi @ m.C_H.sum(1))
    lam_n = float(pi @ m.C_N.sum(1))
    return lam_h, lam_n, lam_h + lam_n


def _mean_absorption(init, sub):
    try:
        x = linalg.solve(sub, np.ones(sub.shape[0]))
    except linalg.LinAlgError as exc:
        raise ConfigError(f"singular sub-generator: {exc}") from exc
    return float(-init @ x)


def ph_mean_rate(p: PhaseType) -> float:
    """Service rate ``mu`` with ``1/mu = -beta A^{-1} e``."""
    return 1.0 / _mean_absorption(p.beta, p.A)


def retrial_mean_rate(r: RetrialPH) -> float:
    """Retrial rate ``theta`` with ``1/theta = -gamma Gamma^{-1} e``."""
    return 1.0 / _mean_absorption(r.gamma, r.Gamma)


# ---------------------------------------------------------------- validation

def _fmt(x):
    return f"{x:.6g}"


def _check_subgenerator(name, A, exits, tol, out):
    n = A.shape[0]
    for i in range(n):
        if A[i, i] >= 0:
            out.append(f"{name}[{i},{i}] = {_fmt(A[i, i])} must be negative")
        for j in range(n):
            if i != j and A[i, j] < 0:
                out.append(f"{name}[{i},{j}] = {_fmt(A[i, j])} off-diagonal must be >= 0")
    if exits is not None:
        bal = A.sum(1) + exits
        for i in np.flatnonzero(np.abs(bal) > tol):
            out.append(f"{name} row {i} balance {_fmt(bal[i])} != 0")
    if not np.all(np.isfinite(A)):
        out.append(f"{name} has non-finite entries")
        return
    ev = np.linalg.eigvals(A)
    if np.any(ev.real >= 0):
        out.append(f"{name} is singular or unstable (max eigenvalue real part {_fmt(ev.real.max())})")


def _check_stochastic(name, v, tol, out):
    for i in np.flatnonzero(v < 0):
        out.append(f"{name}[{i}] = {_fmt(v[i])} must be >= 0")
    s = v.sum()
    if abs(s - 1.0) > tol:
        out.append(f"{name} row sum {_fmt(s)} != 1")


def validate_mmap(m: MarkedMAP, tol: float = GENERATOR_TOL) -> list[str]:
    out = []
    C0 = m.C0
    for i in range(m.L):
        if C0[i, i] >= 0:
            out.append(f"C0[{i},{i}] = {_fmt(C0[i, i])} must be negative")
        for j in range(m.L):
            if i != j and C0[i, j] < 0:
                out.append(f"C0[{i},{j}] = {_fmt(C0[i, j])} off-diagonal must be >= 0")
            for name, D in (("C_N", m.C_N), ("C_H", m.C_H)):
                if D[i, j] < 0:
                    out.append(f"{name}[{i},{j}] = {_fmt(D[i, j])} must be >= 0")
    rs = m.C.sum(1)
    for i in np.flatnonzero(np.abs(rs) > tol):
        out.append(f"C row {i} sum {_fmt(rs[i])} != 0 (tolerance {tol:g})")
    if not out:
        classes = _communicating_classes(m.C)
        if len(classes) > 1:
            out.append(f"C is reducible; communicating classes {classes}")
    return out


def validate_ph(p: PhaseType, name: str = "service") -> list[str]:
    out = []
    _check_stochastic(f"{name}.beta", p.beta, PH_TOL, out)
    for i in np.flatnonzero(p.A0 < -PH_TOL):
        out.append(f"{name}.A0[{i}] = {_fmt(p.A0[i])} must be >= 0")
    _check_subgenerator(f"{name}.A", p.A, None, PH_TOL, out)
    return out


def validate_retrial(r: RetrialPH) -> list[str]:
    out = []
    _check_stochastic("retrial.gamma", r.gamma, PH_TOL, out)
    for name, v in (("exit_leave", r.exit_leave), ("exit_retry", r.exit_retry)):
        for i in np.flatnonzero(v < 0):
            out.append(f"retrial.{name}[{i}] = {_fmt(v[i])} must be >= 0")
    _check_subgenerator("retrial.Gamma", r.Gamma, r.exit_leave + r.exit_retry, PH_TOL, out)
    return out


def validate(cfg: ModelConfig, tol: float | None = None) -> list[str]:
    """List every violated invariant; an empty list means admissible."""
    tol = cfg.row_sum_tol if tol is None else tol
    out = validate_mmap(cfg.mmap, tol)
    out += validate_ph(cfg.service_h, "service_h")
    out += validate_ph(cfg.service_n, "service_n")
    out += validate_retrial(cfg.retrial)
    if int(cfg.S) != cfg.S or cfg.S < 1:
        out.append(f"S = {cfg.S} must be a positive integer")
    t = cfg.truncation
    if t.M is not None and t.M < 1:
        out.append(f"truncation M = {t.M} must be >= 1")
    if t.eps <= 0:
        out.append(f"truncation eps = {t.eps} must be > 0")
    return out


def require_valid(cfg: ModelConfig) -> ModelConfig:
    report = validate(cfg)
    if report:
        raise ConfigError("invalid model configuration:\n  " + "\n  ".join(report), report)
    return cfg


# ---------------------------------------------------------------- rescaling

def _scaled_mmap(base: MarkedMAP, c_n: float, c_h: float) -> MarkedMAP:
    return MarkedMAP(base.C0, c_n * base.C_N, c_h * base.C_H).renormalized()


def _solve_scale(rate_of, target, what):
    """Find c >= 0 with rate_of(c) = target by bracketing + Brent."""
    if target == 0:
        return 0.0
    hi = 1.0
    while rate_of(hi) < target:
        hi *= 2.0
        if hi > 1e12:
            raise ConfigError(f"cannot reach {what} = {target}")
    return optimize.brentq(lambda c: rate_of(c) - target, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def scale_arrivals(m: MarkedMAP, lambda_h: float | None = None,
                   lambda_n: float | None = None, tol: float = 1e-9) -> MarkedMAP:
    """Rescale ``C_H`` and/or ``C_N`` so the fundamental rates hit the targets.

    The marked matrices keep their shape; the diagonal of ``C0`` absorbs the
    change. Because ``pi`` moves with the scaling, each scale factor is
    found by one-dimensional root finding. A class without a target keeps
    its current rate, so both factors are solved for alternately.
    """
    base = m
    for name, target, D in (("lambda_h", lambda_h, m.C_H), ("lambda_n", lambda_n, m.C_N)):
        if target is not None and target < 0:
            raise ConfigError(f"{name} target must be >= 0")
        if target and not np.any(D > 0):
            raise ConfigError(f"cannot scale {name}: base marked matrix is zero")
    c_h = c_n = 1.0
    lh0, ln0, _ = fundamental_rates(base)
    # pin the untargeted class so moving pi does not drag its rate along
    if lambda_h is None and lambda_n is not None and lh0 > 0:
        lambda_h = lh0
    if lambda_n is None and lambda_h is not None and ln0 > 0:
        lambda_n = ln0
    if lambda_h is not None and lh0 > 0:
        c_h = lambda_h / lh0
    if lambda_n is not None and ln0 > 0:
        c_n = lambda_n / ln0
    for _ in range(200):
        if lambda_h is not None:
            c_h = _solve_scale(lambda c: fundamental_rates(_scaled_mmap(base, c_n, c))[0],
                               lambda_h, "lambda_h")
        if lambda_n is not None:
            c_n = _solve_scale(lambda c: fundamental_rates(_scaled_mmap(base, c, c_h))[1],
                               lambda_n, "lambda_n")
        out = _scaled_mmap(base, c_n, c_h)
        lh, ln, _ = fundamental_rates(out)
        ok_h = lambda_h is None or abs(lh - lambda_h) <= tol * max(1.0, lambda_h)
        ok_n = lambda_n is None or abs(ln - lambda_n) <= tol * max(1.0, lambda_n)
        if ok_h and ok_n:
            return out
    raise ConfigError(f"arrival rescaling did not converge (lambda_h={lh}, lambda_n={ln})")


def scale_service(p: PhaseType, mu: float) -> PhaseType:
    if mu <= 0:
        raise ConfigError("service rate target must be > 0")
    return PhaseType(p.beta, p.A * (mu / ph_mean_rate(p)))


def scale_retrial(r: RetrialPH, theta: float) -> RetrialPH:
    if theta <= 0:
        raise ConfigError("retrial rate target must be > 0")
    c = theta / retrial_mean_rate(r)
    return RetrialPH(r.gamma, r.Gamma * c, r.exit_leave * c, r.exit_retry * c)


TARGET_KEYS = ("lambda_h", "lambda_n", "mu_h", "mu_n", "theta")


def with_targets(cfg: ModelConfig, lambda_h=None, lambda_n=None, mu_h=None,
                 mu_n=None, theta=None) -> ModelConfig:
    """Return a copy of ``cfg`` whose fundamental rates match the targets."""
    changes = {}
    if lambda_h is not None or lambda_n is not None:
        changes["mmap"] = scale_arrivals(cfg.mmap, lambda_h, lambda_n)
    if mu_h is not None:
        changes["service_h"] = scale_service(cfg.service_h, mu_h)
    if mu_n is not None:
        changes["service_n"] = scale_service(cfg.service_n, mu_n)
    if theta is not None:
        changes["retrial"] = scale_retrial(cfg.retrial, theta)
    return cfg.replace(**changes) if changes else cfg


def exponential_config(S, lambda_h, lambda_n, mu_h, mu_n, leave, retry, M=None):
    """All phase alphabets of size one: the M/M/S retrial chain."""
    return ModelConfig(
        mmap=MarkedMAP([[-(lambda_h + lambda_n)]], [[lambda_n]], [[lambda_h]]),
        service_h=PhaseType([1.0], [[-mu_h]]),
        service_n=PhaseType([1.0], [[-mu_n]]),
        retrial=RetrialPH([1.0], [[-(leave + retry)]], [leave], [retry]),
        S=S,
        truncation=TruncationPolicy(M=M),
    )
