import numpy as np
import pytest

from retrialq.errors import DimensionCapError, NonConvergenceError
from retrialq.measures import dropping_probability
from retrialq.model import exponential_config
from retrialq.solver import (EQ1_TOL, choose_truncation, direct_solve, rate_matrices, solve,
                            solve_fixed)
from retrialq.generator import Generator

from conftest import random_config
from oracles import exponential_chain


@pytest.mark.parametrize("mode", ["ordered", "lumped"])
@pytest.mark.parametrize("seed,S", [(0, 1), (1, 2), (2, 3)])
def test_recursion_matches_direct(mode, seed, S):
    cfg = random_config(seed, S=S, L=2, M_H=2, M_N=1, N=2)
    M = 4
    ss = solve_fixed(cfg, M, mode)
    ref = direct_solve(cfg, M, mode)
    assert np.abs(ss.flat() - ref.flat()).max() <= 1e-8
    assert ss.eq1_residual <= EQ1_TOL
    assert ss.residual <= 1e-10


def test_rate_matrices_nonnegative(small_cfg):
    R, D0, eq1 = rate_matrices(Generator(small_cfg, "lumped"), 5)
    assert len(R) == 5
    assert min(r.min_entry for r in R) >= -1e-12
    assert eq1 <= EQ1_TOL


def test_exponential_chain_oracle():
    args = dict(S=2, lambda_h=0.6, lambda_n=0.8, mu_h=1.0, mu_n=1.5, leave=0.3, retry=1.2)
    M = 8
    ss = solve(exponential_config(**args), M=M)
    states, pi = exponential_chain(args["S"], args["lambda_h"], args["lambda_n"], args["mu_h"],
                                   args["mu_n"], args["leave"], args["retry"], M)
    lookup = dict(zip(states, pi))
    worst = 0.0
    for l in range(M + 1):
        for kappa in range(args["S"] + 1):
            for j in range(kappa + 1):
                got = float(ss.segment(l, kappa, j).sum())
                worst = max(worst, abs(got - lookup[(l, j, kappa - j)]))
    assert worst <= 1e-10


@pytest.mark.parametrize("rho", [0.1, 0.8, 3.0])
def test_single_channel_handoff_loss(rho):
    cfg = exponential_config(S=1, lambda_h=rho, lambda_n=0.0, mu_h=1.0, mu_n=1.0,
                             leave=0.5, retry=0.5)
    ss = solve(cfg, M=3)
    assert dropping_probability(ss) == pytest.approx(rho / (1 + rho), abs=1e-10)


def test_truncation_search_meets_eps(expo_cfg):
    M, report, solves = choose_truncation(expo_cfg, eps=1e-7, m_cap=60)
    assert report.M == M
    assert report.tail_mass <= 1e-7
    assert all(v <= 1e-7 for v in report.deltas.values())
    assert M + 1 in solves


def test_auto_solve_records_truncation(expo_cfg):
    ss = solve(expo_cfg)
    assert ss.info["truncation"].M == ss.M
    assert abs(sum(z.sum() for z in ss.z) - 1) < 1e-12


def test_non_convergence_names_cap(expo_cfg):
    with pytest.raises(NonConvergenceError) as exc:
        solve(expo_cfg, eps=1e-14, m_cap=3)
    assert "M_cap=3" in str(exc.value)
    assert exc.value.m_cap == 3


def test_dense_cap():
    cfg = random_config(0, S=2, L=2, M_H=2, M_N=2, N=2)
    with pytest.raises(DimensionCapError):
        solve_fixed(cfg, 6, "ordered", dense_cap=500)


def test_direct_solve_cap(small_cfg):
    with pytest.raises(DimensionCapError):
        direct_solve(small_cfg, 6, "ordered", max_dim=100)


def test_probability_vector(small_cfg):
    ss = solve(small_cfg, M=5)
    flat = ss.flat()
    assert flat.min() >= 0
    assert flat.sum() == pytest.approx(1, abs=1e-13)
    assert ss.level_mass.size == 6
