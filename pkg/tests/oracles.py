"""Independent reference chains built from scratch, without the package's
Kronecker machinery."""

import numpy as np
from scipy import linalg


def stationary(Q):
    """Dense stationary vector via the augmented system pi Q = 0, pi e = 1."""
    n = Q.shape[0]
    A = np.vstack([Q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return linalg.lstsq(A, b)[0]


def exponential_chain(S, lam_h, lam_n, mu_h, mu_n, leave, retry, M):
    """Scalar retrial queue with preemption, handoff loss and impatience.

    States ``(l, h, n)``: orbit size, handoff and new calls in service. At
    the top level ``M`` a call that would enter the orbit is lost.
    Returns ``(states, pi)``.
    """
    states = [(l, h, n) for l in range(M + 1) for h in range(S + 1) for n in range(S + 1 - h)]
    idx = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))

    def add(a, b, rate):
        if rate and a != b:
            Q[idx[a], idx[b]] += rate

    for (l, h, n) in states:
        s = (l, h, n)
        up = min(l + 1, M)
        if h + n < S:
            add(s, (l, h + 1, n), lam_h)
            add(s, (l, h, n + 1), lam_n)
        else:
            if n > 0:
                add(s, (up, h + 1, n - 1), lam_h)
            add(s, (up, h, n), lam_n)
        add(s, (l, h - 1, n), h * mu_h)
        add(s, (l, h, n - 1), n * mu_n)
        if l:
            add(s, (l - 1, h, n), l * leave)
            if h + n < S:
                add(s, (l - 1, h, n + 1), l * retry)
    np.fill_diagonal(Q, -Q.sum(1))
    return states, stationary(Q)


def erlang_b(S, a):
    """Erlang loss formula by the stable recursion."""
    b = 1.0
    for k in range(1, S + 1):
        b = a * b / (k + a * b)
    return b

