import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nesb.divergence import Divergence, divergence_value
from nesb.errors import Infeasible, TooLarge
from nesb.oracle import (
    data_processing_decomposition,
    endpoint_factorization_defect,
    path_table,
    solve_paths,
)
from nesb.ref_chain import GridSpec, TimeGridSpec, build_chain

DIVS = [Divergence.entropy(), Divergence.chi_squared(), Divergence.tsallis(2.0), Divergence.hellinger()]


def small_chain(n=3, steps=2, nu0=None, seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=n) * 0.5
    return build_chain(GridSpec(-1, 1, n), TimeGridSpec(0.6, steps), vals, nu0=nu0)


def objective(table, div, q):
    return float(q @ table.cost) + divergence_value(div, q, table.prob)


def test_reference_is_optimal_when_marginals_match():
    ch = small_chain(2, 1)
    table = path_table(ch)
    muT = ch.marginals()[-1]
    res = solve_paths(table, Divergence.entropy(), ch.nu0, muT)
    assert res.value == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(res.q, table.prob, atol=1e-8)


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.label)
def test_marginals_and_factorization(div):
    ch = small_chain(3, 2)
    rng = np.random.default_rng(4)
    C = rng.uniform(-1, 1, (3, 3))
    table = path_table(ch, C)
    muT = rng.dirichlet(np.ones(3) * 3)
    res = solve_paths(table, div, ch.nu0, muT)
    assert res.residual <= 1e-8
    assert endpoint_factorization_defect(table, res.q) <= 1e-6


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.label)
def test_feasible_perturbations_do_not_improve(div):
    ch = small_chain(3, 2, seed=2)
    rng = np.random.default_rng(7)
    C = rng.uniform(-1, 1, (3, 3))
    table = path_table(ch, C)
    muT = rng.dirichlet(np.ones(3) * 3)
    res = solve_paths(table, div, ch.nu0, muT)
    base = objective(table, div, res.q)
    A = table.marginal_matrix()
    # null-space directions keep both marginals fixed
    _, s, vt = np.linalg.svd(A)
    null = vt[np.sum(s > 1e-10):]
    for _ in range(20):
        d = null.T @ rng.normal(size=null.shape[0])
        d *= 1e-3 / np.abs(d).max()
        for sgn in (1, -1):
            cand = res.q + sgn * d
            if np.all(cand >= 0):
                assert objective(table, div, cand) >= base - 1e-9


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.label)
def test_unique_from_different_starts(div):
    ch = small_chain(3, 2, seed=5)
    rng = np.random.default_rng(9)
    table = path_table(ch, rng.uniform(-1, 1, (3, 3)))
    muT = rng.dirichlet(np.ones(3) * 2)
    a = solve_paths(table, div, ch.nu0, muT, seed=1)
    b = solve_paths(table, div, ch.nu0, muT, seed=2)
    assert np.max(np.abs(a.q - b.q)) <= 1e-6


def test_infeasible_unreachable_target():
    ch = small_chain(3, 1)
    ch.kernels[:] = np.eye(3)
    table = path_table(ch)
    with pytest.raises(Infeasible):
        solve_paths(table, Divergence.entropy(), [1.0, 0, 0], [0, 1.0, 0])


def test_too_large():
    ch = build_chain(GridSpec(-1, 1, 10), TimeGridSpec(1.0, 6), lambda x: x * x)
    with pytest.raises(TooLarge) as err:
        path_table(ch)
    assert err.value.count == 10**7


def test_decomposition_endpoint_measurable_equality():
    ch = small_chain(3, 2, seed=1)
    table = path_table(ch)
    rng = np.random.default_rng(0)
    g = rng.uniform(0.2, 2.0, (3, 3))
    q = table.prob * g[table.paths[:, 0], table.paths[:, -1]]
    q /= q.sum()
    for div in DIVS:
        lhs, rhs_p, rhs_q = data_processing_decomposition(table, q, div)
        assert lhs == pytest.approx(rhs_p, abs=1e-12)
        assert lhs == pytest.approx(rhs_q, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_entropy_chain_rule(seed):
    rng = np.random.default_rng(seed)
    ch = small_chain(3, 2, seed=seed % 7)
    table = path_table(ch)
    q = rng.dirichlet(np.ones(len(table.prob)))
    lhs, rhs_p, rhs_q = data_processing_decomposition(table, q, Divergence.entropy())
    assert lhs == pytest.approx(rhs_q, abs=1e-10)
    for div in DIVS:
        lhs, _, _ = data_processing_decomposition(table, q, div)
        endpoint = table.endpoint_divergence(q, div)
        assert lhs - endpoint >= -1e-12


def test_chi_squared_decomposition_gap():
    # Two paths per endpoint class, tilted against the endpoint weight.
    ch = small_chain(2, 2, seed=3)
    ch.kernels[:] = 0.5
    ch.nu0 = np.array([0.5, 0.5])
    table = path_table(ch)
    cls = table.paths[:, 0] * 2 + table.paths[:, -1]
    mid = table.paths[:, 1]
    g = np.array([0.2, 1.0, 1.0, 1.8])[cls] * np.where(mid == 0, 0.3, 1.7)
    q = table.prob * g
    q /= q.sum()
    lhs, rhs_p, rhs_q = data_processing_decomposition(table, q, Divergence.chi_squared())
    assert abs(lhs - rhs_q) >= 1e-3
    assert abs(lhs - rhs_p) >= 1e-3
