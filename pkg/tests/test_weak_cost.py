import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nesb.weak_cost import WeakCost, apply_qc, check_weak_target, weak_ot_value
from nesb.errors import InvalidArgument

GRID = np.linspace(-1.0, 1.0, 9)


def brute_transform(phi, points, cost):
    out = np.empty_like(phi)
    for i, x in enumerate(points):
        out[i] = min(phi[j] + cost(x, y) for j, y in enumerate(points))
    return out


def pairwise_envelope(points, phi):
    """Convex envelope on a grid by minimizing over all bracketing pairs."""
    n = len(points)
    env = phi.copy()
    for k in range(n):
        for i in range(k + 1):
            for j in range(k, n):
                if i == j:
                    continue
                t = (points[k] - points[i]) / (points[j] - points[i])
                env[k] = min(env[k], (1 - t) * phi[i] + t * phi[j])
    return env


def w1_cdf(points, mu, nu):
    return float(np.sum(np.abs(np.cumsum(mu - nu))[:-1] * np.diff(points)))


def all_costs(points):
    return [
        WeakCost.total_variation(),
        WeakCost.marton(points, 1.0),
        WeakCost.marton(points, 2.0),
        WeakCost.barycentric(points, "square"),
        WeakCost.barycentric(points, "abs"),
        WeakCost.moreau_yosida(points, 1.5),
    ]


def test_tv_is_identity():
    phi = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(apply_qc(WeakCost.total_variation(), phi), phi)


def test_moreau_yosida_example():
    pts = np.linspace(-1.0, 2.0, 901)  # contains 1/3 and 1
    qc = apply_qc(WeakCost.moreau_yosida(pts, 1.0), pts**2)
    assert qc[np.argmin(abs(pts - 1.0))] == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_marton_matches_brute_force():
    rng = np.random.default_rng(0)
    for p in (1.0, 2.0, 3.0):
        phi = rng.normal(size=GRID.size)
        got = apply_qc(WeakCost.marton(GRID, p), phi)
        want = brute_transform(phi, GRID, lambda x, y: abs(x - y) ** p)
        np.testing.assert_allclose(got, want, atol=1e-14)


def test_barycentric_uses_convex_envelope():
    rng = np.random.default_rng(3)
    for _ in range(10):
        phi = rng.normal(size=GRID.size) * 2
        env = pairwise_envelope(GRID, phi)
        want = brute_transform(env, GRID, lambda x, y: (x - y) ** 2)
        got = apply_qc(WeakCost.barycentric(GRID, "square"), phi)
        np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("cost", all_costs(GRID), ids=lambda c: c.kind)
def test_transform_kernel_attains_value(cost):
    rng = np.random.default_rng(5)
    phi = rng.normal(size=GRID.size)
    qc, kern = apply_qc(cost, phi, return_kernel=True)
    np.testing.assert_allclose(kern.sum(1), 1.0, atol=1e-12)
    assert np.all(kern >= 0)
    recon = kern @ phi + np.array([cost.cost(i, kern[i]) for i in range(GRID.size)])
    np.testing.assert_allclose(recon, qc, atol=1e-12)


@pytest.mark.parametrize("cost", all_costs(GRID), ids=lambda c: c.kind)
@settings(max_examples=40, deadline=None)
@given(phi=st.lists(st.floats(-5, 5), min_size=9, max_size=9), k=st.floats(-10, 10))
def test_translation_equivariance_and_upper_bound(cost, phi, k):
    phi = np.array(phi)
    base = apply_qc(cost, phi)
    np.testing.assert_allclose(apply_qc(cost, phi + k), base + k, atol=1e-12)
    diag = np.array([cost.cost(i, np.eye(GRID.size)[i]) for i in range(GRID.size)])
    assert np.all(base <= phi + diag + 1e-12)


@pytest.mark.parametrize("cost", all_costs(GRID), ids=lambda c: c.kind)
@settings(max_examples=30, deadline=None)
@given(phi=st.lists(st.floats(-5, 5), min_size=9, max_size=9),
       bump=st.lists(st.floats(0, 3), min_size=9, max_size=9))
def test_monotone(cost, phi, bump):
    phi = np.array(phi)
    assert np.all(apply_qc(cost, phi) <= apply_qc(cost, phi + np.array(bump)) + 1e-12)


def test_tv_value_examples():
    tv = WeakCost.total_variation()
    mu = np.array([0.2, 0.3, 0.5])
    assert weak_ot_value(tv, mu, mu) == pytest.approx(0.0, abs=1e-8)
    assert weak_ot_value(tv, [1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-8)


def test_tv_value_formula():
    rng = np.random.default_rng(11)
    tv = WeakCost.total_variation()
    for _ in range(8):
        n = int(rng.integers(2, 8))
        mu, nu = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        assert weak_ot_value(tv, mu, nu) == pytest.approx(0.5 * np.abs(mu - nu).sum(), abs=1e-8)


def test_marton_one_is_w1():
    rng = np.random.default_rng(12)
    for _ in range(5):
        mu, nu = rng.dirichlet(np.ones(GRID.size)), rng.dirichlet(np.ones(GRID.size))
        got = weak_ot_value(WeakCost.marton(GRID, 1.0), mu, nu)
        assert got == pytest.approx(w1_cdf(GRID, mu, nu), abs=1e-7)


def test_barycentric_dirac_at_mean():
    nu = np.zeros(GRID.size)
    nu[[1, 7]] = 0.5
    mu = np.zeros(GRID.size)
    mu[4] = 1.0
    cost = WeakCost.barycentric(GRID, "square")
    assert weak_ot_value(cost, mu, nu) == pytest.approx(0.0, abs=1e-8)
    assert check_weak_target(cost, mu, nu, 1e-6)


def test_check_weak_target_tv():
    mu = np.array([0.5, 0.5, 0.0])
    nu = np.array([0.3, 0.5, 0.2])
    assert not check_weak_target(WeakCost.total_variation(), mu, nu, 1e-8)
    assert check_weak_target(WeakCost.total_variation(), mu, mu, 1e-8)


@pytest.mark.parametrize("cost", all_costs(GRID)[1:4] + all_costs(GRID)[5:], ids=lambda c: c.kind)
def test_primal_dual_bound(cost):
    # W_c(mu, nu) >= <mu, Q_c phi> - <nu, phi> for every phi.
    rng = np.random.default_rng(21)
    mu, nu = rng.dirichlet(np.ones(GRID.size)), rng.dirichlet(np.ones(GRID.size))
    w = weak_ot_value(cost, mu, nu)
    for _ in range(50):
        phi = rng.normal(size=GRID.size) * 3
        assert w - (mu @ apply_qc(cost, phi) - nu @ phi) >= -1e-8


def test_invalid_arguments():
    with pytest.raises(InvalidArgument):
        WeakCost.marton(GRID, 0.5)
    with pytest.raises(InvalidArgument):
        WeakCost.moreau_yosida(GRID, -1.0)
    with pytest.raises(InvalidArgument):
        apply_qc(WeakCost.marton(GRID, 1.0), np.zeros(3))
