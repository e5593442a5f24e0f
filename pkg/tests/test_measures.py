import json
import math

import numpy as np
import pytest

from retrialq.errors import UndefinedMeasureError
from retrialq.measures import (MEASURES, blocking_probability, compute_measures,
                               dropping_probability, flows, orbit_join_probability)
from retrialq.model import exponential_config
from retrialq.solver import solve

from conftest import random_config
from oracles import erlang_b, exponential_chain


@pytest.fixture(scope="module")
def solved():
    return solve(random_config(11, S=2, L=2, M_H=2, M_N=2, N=2), M=6)


def test_flow_conservation(solved):
    f = flows(solved)
    assert f["lambda_h"] == pytest.approx(f["handoff_completion"] + f["handoff_drop"], abs=1e-12)
    new_out = f["new_completion"] + f["abandonment"] + f["truncation_loss"]
    assert f["lambda_n"] == pytest.approx(new_out, abs=1e-12)


def test_distributions_sum_to_one(solved):
    r = compute_measures(solved)
    for d in (r.P_H, r.P_N, r.P_orbit):
        assert d.sum() == pytest.approx(1, abs=1e-12)
        assert d.min() >= 0
    assert r.E_orbit == pytest.approx(np.arange(r.P_orbit.size) @ r.P_orbit)


def test_ordered_and_lumped_reports_agree():
    cfg = random_config(4, S=2, L=2, M_H=2, M_N=1, N=2)
    a = compute_measures(solve(cfg, M=3, mode="ordered")).flat()
    b = compute_measures(solve(cfg, M=3, mode="lumped")).flat()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-10), k


def test_handoff_loss_does_not_see_truncation():
    # handoff calls never enter the orbit, so P_d is exact for every M
    cfg = random_config(5, S=2, L=2, M_H=2, M_N=1, N=2)
    ref = dropping_probability(solve(cfg, M=2))
    for M in (4, 7):
        assert dropping_probability(solve(cfg, M=M)) == pytest.approx(ref, abs=1e-12)


def test_poisson_handoff_loss_is_erlang():
    cfg = exponential_config(S=3, lambda_h=0.9, lambda_n=0.5, mu_h=0.6, mu_n=1.0,
                             leave=0.3, retry=0.8)
    assert dropping_probability(solve(cfg, M=4)) == pytest.approx(erlang_b(3, 1.5), abs=1e-12)


def test_scalar_measures_against_hand_chain():
    p = dict(S=2, lam_h=0.5, lam_n=0.7, mu_h=1.1, mu_n=0.9, leave=0.4, retry=1.0)
    M = 6
    states, pi = exponential_chain(p["S"], p["lam_h"], p["lam_n"], p["mu_h"], p["mu_n"],
                                   p["leave"], p["retry"], M)
    cfg = exponential_config(p["S"], p["lam_h"], p["lam_n"], p["mu_h"], p["mu_n"], p["leave"],
                             p["retry"])
    r = compute_measures(solve(cfg, M=M))
    S = p["S"]
    busy = [(l, h, n, x) for (l, h, n), x in zip(states, pi) if h + n == S]
    preempt = sum(x for l, h, n, x in busy if n > 0)
    join = sum(x for *_, x in busy)
    assert r.P_preempt == pytest.approx(preempt, abs=1e-12)
    assert r.P_orbit_join == pytest.approx(join, abs=1e-12)
    E_N = sum(n * x for (l, h, n), x in zip(states, pi))
    assert r.E_N == pytest.approx(E_N, abs=1e-12)
    succ = sum(l * p["retry"] * x for (l, h, n), x in zip(states, pi) if h + n < S)
    assert r.theta_r_succ_flow == pytest.approx(succ, abs=1e-12)
    assert r.theta_r_succ == pytest.approx((p["leave"] + p["retry"]) * succ, abs=1e-12)
    T = sum((h * p["mu_h"] + n * p["mu_n"]) * x for (l, h, n), x in zip(states, pi))
    assert r.T_P == pytest.approx(T, abs=1e-12)
    assert r.T_P_literal == pytest.approx(T, abs=1e-12)
    block = sum(x for (l, h, n), x in zip(states, pi) if l == M - 1 and h + n == S)
    assert r.P_b == pytest.approx(block, abs=1e-12)


def test_undefined_ratios():
    cfg = exponential_config(S=1, lambda_h=0.5, lambda_n=0.0, mu_h=1.0, mu_n=1.0,
                             leave=0.5, retry=0.5)
    ss = solve(cfg, M=2)
    with pytest.raises(UndefinedMeasureError):
        orbit_join_probability(ss)
    r = compute_measures(ss)
    assert math.isnan(r.P_orbit_join) and math.isnan(r.P_b)
    assert json.loads(r.to_json())["P_orbit_join"] is None


def test_blocking_reads_level_below_top(solved):
    assert blocking_probability(solved) <= compute_measures(solved).P_orbit_join


def test_report_serialisation(solved):
    r = compute_measures(solved)
    assert set(r.comparable()) == set(MEASURES)
    head, values = r.csv_row().strip().split("\n")
    assert head.split(",")[0] == "M" and len(head.split(",")) == len(values.split(","))
