import numpy as np
import pytest

from retrialq.model import (MarkedMAP, ModelConfig, PhaseType, RetrialPH, TruncationPolicy,
                            exponential_config)


def random_mmap(rng, L, scale=1.0):
    C0 = rng.uniform(0.1, 1.0, (L, L)) * (rng.random((L, L)) < 0.7)
    C_N = rng.uniform(0.05, 0.5, (L, L)) * scale
    C_H = rng.uniform(0.05, 0.5, (L, L)) * scale
    np.fill_diagonal(C0, 0.0)
    np.fill_diagonal(C0, -(C0.sum(1) + C_N.sum(1) + C_H.sum(1)))
    return MarkedMAP(C0, C_N, C_H)


def random_ph(rng, M, rate=1.0):
    beta = rng.dirichlet(np.ones(M))
    A = rng.uniform(0.0, 0.5, (M, M)) * rate
    np.fill_diagonal(A, 0.0)
    exits = rng.uniform(0.2, 1.0, M) * rate
    np.fill_diagonal(A, -(A.sum(1) + exits))
    return PhaseType(beta, A)


def random_retrial(rng, N):
    gamma = rng.dirichlet(np.ones(N))
    G = rng.uniform(0.0, 0.5, (N, N))
    np.fill_diagonal(G, 0.0)
    leave = rng.uniform(0.1, 0.6, N)
    retry = rng.uniform(0.3, 1.5, N)
    np.fill_diagonal(G, -(G.sum(1) + leave + retry))
    return RetrialPH(gamma, G, leave, retry)


def random_config(seed, S=2, L=2, M_H=2, M_N=2, N=2, load=1.0, M=None):
    rng = np.random.default_rng(seed)
    return ModelConfig(
        mmap=random_mmap(rng, L, 0.4 * load),
        service_h=random_ph(rng, M_H),
        service_n=random_ph(rng, M_N),
        retrial=random_retrial(rng, N),
        S=S,
        truncation=TruncationPolicy(M=M, eps=1e-8),
    )


@pytest.fixture
def small_cfg():
    return random_config(7, S=2, L=2, M_H=2, M_N=2, N=2)


@pytest.fixture
def expo_cfg():
    return exponential_config(S=2, lambda_h=0.6, lambda_n=0.8, mu_h=1.0, mu_n=1.5,
                              leave=0.3, retry=1.2)
