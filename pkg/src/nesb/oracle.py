"""Brute-force path-space solver used as an independent check.

Every path of a small chain is enumerated and the static problem

    min_q  sum_w q(w) C(w) + sum_w p(w) l(q(w)/p(w))
    s.t.   q has initial law mu0 and terminal law muT

is solved directly with an augmented Lagrangian. Nothing here uses the
endpoint structure of the optimizer, so it can certify it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _alpg
from .divergence import as_measure, divergence_value
from .errors import Infeasible, InvalidArgument, TooLarge

MAX_PATHS = 10**6


@dataclass(eq=False)
class PathTable:
    paths: np.ndarray   # (M, n_steps + 1) state indices
    prob: np.ndarray    # reference probability of each path
    cost: np.ndarray    # cost of each path
    n_states: int

    @property
    def starts(self):
        return self.paths[:, 0]

    @property
    def ends(self):
        return self.paths[:, -1]

    def marginal_matrix(self):
        """Linear map q -> (initial law, terminal law)."""
        n, M = self.n_states, len(self.prob)
        A = np.zeros((2 * n, M))
        A[self.starts, np.arange(M)] = 1.0
        A[n + self.ends, np.arange(M)] = 1.0
        return A

    def endpoint_law(self, q):
        out = np.zeros((self.n_states, self.n_states))
        np.add.at(out, (self.starts, self.ends), q)
        return out

    def endpoint_divergence(self, q, div):
        return divergence_value(div, self.endpoint_law(q).ravel(), self.endpoint_law(self.prob).ravel())


@dataclass
class PathSolution:
    q: np.ndarray
    value: float
    residual: float
    converged: bool


def path_table(chain, cost=None):
    """Enumerate all paths of ``chain`` with their probabilities and costs.

    ``cost`` is None, an endpoint matrix ``C[x0, xT]`` or a callable on an
    array of paths of grid positions.
    """
    n, T = chain.n, chain.time.n_steps
    count = n ** (T + 1)
    if count > MAX_PATHS:
        raise TooLarge(f"{count} paths exceed {MAX_PATHS}", count)
    paths = np.array(list(itertools.product(range(n), repeat=T + 1)), dtype=int)
    prob = chain.nu0[paths[:, 0]].copy()
    for t in range(T):
        prob *= chain.kernels[t][paths[:, t], paths[:, t + 1]]
    if cost is None:
        c = np.zeros(count)
    elif callable(cost):
        c = np.asarray(cost(chain.grid.points[paths]), dtype=float)
    else:
        C = np.asarray(cost, dtype=float)
        if C.shape != (n, n):
            raise InvalidArgument("endpoint cost must be n x n")
        c = C[paths[:, 0], paths[:, -1]]
    return PathTable(paths, prob, c, n)


def _ell_prime(div, u):
    if div.kind == "entropy":
        return np.log(u)
    if div.kind == "chi_squared":
        return u - 1.0
    if div.kind == "tsallis":
        return div.q * u ** (div.q - 1.0) / (div.q - 1.0)
    return 1.0 - 1.0 / np.sqrt(u)


def solve_paths(table, div, mu0, muT, *, seed=None, feas_tol=1e-8, max_outer=400):
    """Minimize the path-space objective; ``seed`` randomizes the start."""
    n = table.n_states
    mu0 = as_measure(mu0, "mu0")
    muT = as_measure(muT, "muT")
    if mu0.size != n or muT.size != n:
        raise InvalidArgument("marginals do not match the state space")
    live = (table.prob > 0) & (mu0[table.starts] > 0) & (muT[table.ends] > 0)
    for name, law, side in (("initial", mu0, table.starts), ("terminal", muT, table.ends)):
        reach = np.zeros(n, dtype=bool)
        reach[side[live]] = True
        if np.any((law > 0) & ~reach):
            raise Infeasible(f"{name} marginal charges states no admissible path reaches")
    idx = np.flatnonzero(live)
    p = table.prob[idx]
    c = table.cost[idx]
    A = table.marginal_matrix()[:, idx] * p[None, :]
    b = np.concatenate([mu0, muT])
    floor = 1e-14 if div.kind in ("entropy", "hellinger") else 0.0

    def fun(u):
        ug = np.maximum(u, 1e-14) if floor else u
        val = float(p @ (div.ell(u) + c * u))
        return val, p * (_ell_prime(div, ug) + c)

    def project(u):
        return np.maximum(u, floor)

    if seed is None:
        # Independent coupling of the marginals, reweighted onto paths.
        P0T = table.endpoint_law(table.prob)
        ratio = np.outer(mu0, muT) / np.where(P0T > 0, P0T, 1.0)
        ratio = ratio / max((P0T * ratio).sum(), 1e-300)
        u0 = ratio[table.starts[idx], table.ends[idx]]
    else:
        u0 = np.random.default_rng(seed).uniform(0.2, 3.0, idx.size)
    res = _alpg.minimize(fun, A, b, project, u0, weight=p, feas_tol=feas_tol,
                         obj_tol=1e-12, stat_tol=1e-10, max_outer=max_outer, penalty_max=1e8)
    if res.residual > 1e3 * feas_tol:
        raise Infeasible(f"constraint residual stalled at {res.residual:.3g}")
    q = np.zeros_like(table.prob)
    q[idx] = p * res.u
    value = float(q @ table.cost) + divergence_value(div, q, table.prob)
    return PathSolution(q, value, res.residual, res.converged)


def endpoint_factorization_defect(table, q):
    """Largest spread of q/p within one endpoint class."""
    live = table.prob > 0
    ratio = q[live] / table.prob[live]
    key = table.starts[live] * table.n_states + table.ends[live]
    n2 = table.n_states**2
    hi = np.full(n2, -np.inf)
    lo = np.full(n2, np.inf)
    np.maximum.at(hi, key, ratio)
    np.minimum.at(lo, key, ratio)
    seen = np.isfinite(hi)
    return float(np.max(hi[seen] - lo[seen])) if seen.any() else 0.0


def data_processing_decomposition(table, q, div):
    """Return ``(lhs, rhs_P, rhs_Q)``.

    ``lhs`` is the path divergence; both right-hand sides add the endpoint
    divergence to the bridge divergences averaged under the reference
    (``rhs_P``) or candidate (``rhs_Q``) endpoint law. Endpoint classes the
    candidate does not charge have no bridge and are skipped.
    """
    q = np.asarray(q, dtype=float)
    lhs = divergence_value(div, q, table.prob)
    P0T = table.endpoint_law(table.prob)
    Q0T = table.endpoint_law(q)
    endpoint = divergence_value(div, Q0T.ravel(), P0T.ravel())
    rhs_p = rhs_q = endpoint
    for x, y in zip(*np.nonzero((P0T > 0) & (Q0T > 0))):
        cls = (table.starts == x) & (table.ends == y)
        bridge = divergence_value(div, q[cls] / Q0T[x, y], table.prob[cls] / P0T[x, y])
        rhs_p += P0T[x, y] * bridge
        rhs_q += Q0T[x, y] * bridge
    return lhs, rhs_p, rhs_q
