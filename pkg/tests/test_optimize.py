import math

import pytest

from retrialq.errors import ConfigError
from retrialq.model import TruncationPolicy, exponential_config
from retrialq.optimize import (Evaluator, OptimizationProblem, direct_search, evaluate, pso,
                               results_csv, simulated_annealing)

from oracles import exponential_chain

BASE = exponential_config(S=2, lambda_h=0.5, lambda_n=0.3, mu_h=1.0, mu_n=1.0, leave=0.5,
                          retry=1.0).replace(truncation=TruncationPolicy(eps=1e-6))
PSO_KW = dict(swarm=12, maxite=40, stall=15)
SA_KW = dict(epoch=25, max_epochs=10, min_epochs=3)


def problem(eps, **kw):
    args = dict(eps1=eps, eps2=eps, s_max=4, quantum=0.02, grid_step=0.05)
    args.update(kw)
    return OptimizationProblem(BASE, **args)


_EVALUATORS = {}


def shared(p):
    """One memo per problem so repeated runs stay cheap."""
    key = (p.eps1, p.eps2, p.lambda_objective, p.s_max)
    if key not in _EVALUATORS:
        _EVALUATORS[key] = Evaluator(p)
    return _EVALUATORS[key]


def test_problem_validation():
    with pytest.raises(ConfigError):
        OptimizationProblem(BASE, s_min=3, s_max=2)
    with pytest.raises(ConfigError):
        OptimizationProblem(BASE, lambda_min=0.0)
    with pytest.raises(ConfigError):
        OptimizationProblem(BASE, lambda_objective="min")


def test_evaluate_vanishing_handoff_load():
    # P_d vanishes, but P_preempt tends to the chance that a (Poisson)
    # arrival finds every channel busy with new calls, which is not zero
    p = problem(0.02)
    pd, pp = evaluate(p, 2, 1e-5)
    states, pi = exponential_chain(2, 0.0, 0.3, 1.0, 1.0, 0.5, 1.0, 40)
    full = sum(x for (l, h, n), x in zip(states, pi) if n == 2)
    assert pd < 1e-8
    assert pp == pytest.approx(full, abs=1e-4)


def test_more_channels_drop_less():
    p = problem(0.02)
    ev = shared(p)
    for lam in (0.2, 0.6, 1.0):
        assert ev(3, lam)[0] <= ev(2, lam)[0]
        assert ev(4, lam)[0] <= ev(3, lam)[0]


def test_memo_quantises_rate():
    ev = Evaluator(problem(0.02))
    a = ev(2, 0.301)
    n = ev.solves
    assert ev(2, 0.299) == a and ev.solves == n


@pytest.mark.parametrize("method", ["ds", "pso", "sa"])
def test_vacuous_constraints_give_lower_bound(method):
    p = problem(1.0)
    if method == "ds":
        r = direct_search(p)
        assert r.lambda_h == pytest.approx(2.0)
    elif method == "pso":
        r = pso(p, seed=0, **PSO_KW)
    else:
        r = simulated_annealing(p, seed=0, **SA_KW)
    assert r.S == 2 and r.feasible and r.verified


def test_direct_search_result_and_minimality():
    p = problem(0.02)
    ev = shared(p)
    r = direct_search(p, coincidence=None, evaluator=ev)
    assert r.feasible and r.verified
    assert r.P_d <= 0.02 and r.P_preempt <= 0.02
    l1, l2 = r.info["scans"][r.S]
    assert r.lambda_h == min(l1, l2)
    # S* - 1 admits no feasible grid rate
    grid = [k * p.grid_step for k in range(1, int(p.lambda_max / p.grid_step) + 1)]
    assert not any(max(pd / p.eps1, pp / p.eps2) <= 1 for pd, pp in
                   (ev(r.S - 1, lam) for lam in grid))


def test_direct_search_coincidence_reading():
    p = problem(0.02)
    ev = shared(p)
    strict = direct_search(p, evaluator=ev)
    loose = direct_search(p, coincidence=None, evaluator=ev)
    last = strict.S if strict.feasible else p.s_max + 1
    for S in range(p.s_min, last):
        a, b = strict.info["scans"][S]
        assert a is None or b is None or abs(a - b) > 1e-9
    if strict.feasible:
        assert strict.S >= loose.S and strict.verified
    wide = direct_search(p, coincidence=100, evaluator=ev)
    assert wide.S == loose.S


def test_direct_search_infeasible():
    r = direct_search(problem(1e-9, s_max=2))
    assert not r.feasible and r.S is None and math.isnan(r.P_d)


@pytest.fixture(scope="module")
def pso_sa_pair():
    p = problem(0.02)
    ev = shared(p)
    return p, pso(p, seed=3, evaluator=ev, **PSO_KW), simulated_annealing(p, seed=3, evaluator=ev,
                                                                           **SA_KW)


def test_pso_and_sa_agree(pso_sa_pair):
    p, a, b = pso_sa_pair
    assert a.S == b.S
    for r in (a, b):
        assert r.feasible and r.verified
        assert r.P_d <= p.eps1 and r.P_preempt <= p.eps2


def test_heuristics_reproducible(pso_sa_pair):
    p, a, b = pso_sa_pair
    ev = shared(p)
    a2 = pso(p, seed=3, evaluator=ev, **PSO_KW)
    b2 = simulated_annealing(p, seed=3, evaluator=ev, **SA_KW)
    assert (a2.S, a2.lambda_h, a2.iterations) == (a.S, a.lambda_h, a.iterations)
    assert (b2.S, b2.lambda_h, b2.iterations) == (b.S, b.lambda_h, b.iterations)


def test_channel_count_nonincreasing_in_eps(pso_sa_pair):
    p, a, b = pso_sa_pair
    loose = problem(0.05)
    ev = shared(loose)
    assert direct_search(loose, coincidence=None, evaluator=ev).S <= \
        direct_search(p, coincidence=None, evaluator=shared(p)).S
    assert pso(loose, seed=3, evaluator=ev, **PSO_KW).S <= a.S
    assert simulated_annealing(loose, seed=3, evaluator=ev, **SA_KW).S <= b.S


def test_free_objective_stays_feasible():
    p = problem(0.02, lambda_objective="free")
    r = pso(p, seed=1, evaluator=shared(p), **PSO_KW)
    assert r.feasible and r.verified and r.objective == r.S


@pytest.mark.parametrize("kw", [dict(swarm=1), dict(maxite=0), dict(w_min=1.0, w_max=0.5)])
def test_pso_hyperparameter_checks(kw):
    with pytest.raises(ValueError):
        pso(problem(1.0), **kw)


@pytest.mark.parametrize("kw", [dict(alpha=1.0), dict(alpha=0.0), dict(epoch=0)])
def test_sa_hyperparameter_checks(kw):
    with pytest.raises(ValueError):
        simulated_annealing(problem(1.0), **kw)


def test_results_csv_columns(pso_sa_pair):
    _, a, b = pso_sa_pair
    text = results_csv([("PSO", 1.0, a), ("SA", 1.0, b)])
    head, *rows = text.strip().split("\n")
    assert head.startswith("method,mu_h,S,lambda_h,P_d,P_preempt,iterations")
    assert len(rows) == 2
    assert a.row(1.0)[:2] == [1.0, a.S]
