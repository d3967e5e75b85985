import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from taskvq.ot import (
    DiscreteMeasure,
    cost_between,
    exact_wasserstein,
    pairwise_cost,
    plan_marginal_error,
    pushforward,
    sinkhorn,
    support_gradient,
    uniform_measure,
)
from taskvq.validation import ContractError


def hungarian_ot(points_x, masses_x, points_y, masses_y, kind="sqeuclidean"):
    """Independent exact oracle: expand integer masses to unit atoms and solve
    the resulting assignment problem."""
    xs = np.repeat(np.arange(len(masses_x)), masses_x)
    ys = np.repeat(np.arange(len(masses_y)), masses_y)
    costs = pairwise_cost(points_x, points_y, kind).values[np.ix_(xs, ys)]
    r, c = linear_sum_assignment(costs)
    return costs[r, c].sum() / sum(masses_x)


def random_integer_instance(rng, n, m, d=2, top=10):
    mx = rng.integers(1, top, size=n)
    my = rng.integers(1, top, size=m)
    # equalize totals so unit-mass expansion is exact
    total = int(np.lcm(mx.sum(), my.sum()))
    mx = mx * (total // mx.sum())
    my = my * (total // my.sum())
    assert mx.sum() == my.sum()
    px = rng.normal(size=(n, d))
    py = rng.normal(size=(m, d))
    mu = DiscreteMeasure(px, mx / mx.sum())
    nu = DiscreteMeasure(py, my / my.sum())
    return mu, nu, (px, mx, py, my)


def test_single_support_squared_cost():
    mu = DiscreteMeasure(np.array([[0.0]]), [1.0])
    nu = DiscreteMeasure(np.array([[1.0]]), [1.0])
    res = exact_wasserstein(mu, nu, kind="sqeuclidean")
    assert abs(res.value - 1.0) < 1e-9
    assert np.allclose(res.plan, [[1.0]], atol=1e-9)


def test_identical_measures_zero_distance():
    mu = uniform_measure(np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]))
    res = exact_wasserstein(mu, mu)
    assert abs(res.value) < 1e-9
    assert np.allclose(res.plan, np.diag(mu.weights), atol=1e-8)


def test_two_by_two_brute_force_value():
    # mu = .5 d0 + .5 d1 vs nu = .3 d0 + .7 d1 with |x - y| cost: one free
    # parameter t = plan[0, 0] in [max(0, .5 - .7), min(.5, .3)]
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    best = np.inf
    for t in np.linspace(max(0.0, 0.5 - 0.7), min(0.5, 0.3), 10001):
        plan = np.array([[t, 0.5 - t], [0.3 - t, 0.7 - (0.5 - t)]])
        if plan.min() < -1e-12:
            continue
        best = min(best, float((plan * cost).sum()))
    assert abs(best - 0.2) < 1e-9

    mu = DiscreteMeasure(np.array([[0.0], [1.0]]), [0.5, 0.5])
    nu = DiscreteMeasure(np.array([[0.0], [1.0]]), [0.3, 0.7])
    res = exact_wasserstein(mu, nu, kind="euclidean")
    assert abs(res.value - best) < 1e-9


@pytest.mark.parametrize("seed", range(8))
def test_exact_matches_hungarian_oracle(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 7), rng.integers(2, 7)
    for kind in ("sqeuclidean", "euclidean"):
        mu, nu, (px, mx, py, my) = random_integer_instance(rng, n, m)
        res = exact_wasserstein(mu, nu, kind=kind)
        want = hungarian_ot(px, mx, py, my, kind)
        assert abs(res.value - want) < 1e-6
        assert plan_marginal_error(res.plan, mu, nu) < 1e-8


def test_metric_properties_random_instances():
    rng = np.random.default_rng(77)
    for _ in range(25):
        n = int(rng.integers(2, 7))
        pts = [rng.normal(size=(n, 2)) for _ in range(3)]
        ws = [rng.dirichlet(np.ones(n)) for _ in range(3)]
        ms = [DiscreteMeasure(p, w) for p, w in zip(pts, ws)]
        d01 = exact_wasserstein(ms[0], ms[1], kind="euclidean").value
        d10 = exact_wasserstein(ms[1], ms[0], kind="euclidean").value
        d02 = exact_wasserstein(ms[0], ms[2], kind="euclidean").value
        d12 = exact_wasserstein(ms[1], ms[2], kind="euclidean").value
        d00 = exact_wasserstein(ms[0], ms[0], kind="euclidean").value
        assert abs(d01 - d10) < 1e-6
        assert abs(d00) < 1e-6
        assert d02 <= d01 + d12 + 1e-6
        assert d01 > 0  # distinct random supports


def _random_feasible_plan(rng, a, b, iters=200):
    """Iterative proportional fitting from a random positive start."""
    p = rng.uniform(0.5, 1.5, size=(len(a), len(b)))
    for _ in range(iters):
        p *= (a / p.sum(axis=1))[:, None]
        p *= (b / p.sum(axis=0))[None, :]
    return p


def test_exact_value_lower_bounds_feasible_plans():
    rng = np.random.default_rng(5)
    for _ in range(10):
        mu = DiscreteMeasure(rng.normal(size=(4, 2)), rng.dirichlet(np.ones(4)))
        nu = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
        cost = cost_between(mu, nu)
        opt = exact_wasserstein(mu, nu, cost).value
        for _ in range(5):
            plan = _random_feasible_plan(rng, mu.weights, nu.weights)
            assert opt <= float((plan * cost.values).sum()) + 1e-8


def test_infeasible_weights_rejected():
    with pytest.raises(ContractError):
        DiscreteMeasure(np.array([[0.0], [1.0]]), [0.5, 0.6])


def test_sinkhorn_identical_measures_bound():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(6, 3))
    mu = uniform_measure(pts)
    for eps in (1.0, 0.1, 0.01):
        res = sinkhorn(mu, mu, epsilon=eps)
        assert res.value <= eps * np.log(6) + 1e-6
        assert np.allclose(res.plan, np.diag(mu.weights), atol=0.3)
    tight = sinkhorn(mu, mu, epsilon=1e-4)
    assert np.allclose(tight.plan, np.diag(mu.weights), atol=1e-4)


def test_sinkhorn_close_to_exact_at_small_epsilon():
    rng = np.random.default_rng(9)
    for _ in range(5):
        mu = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
        nu = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
        exact = exact_wasserstein(mu, nu).value
        approx = sinkhorn(mu, nu, epsilon=1e-3)
        assert abs(approx.value - exact) < 1e-2 * exact
        assert plan_marginal_error(approx.plan, mu, nu) < 1e-6


def test_sinkhorn_epsilon_sweep_monotone_approach():
    rng = np.random.default_rng(4)
    mu = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
    nu = DiscreteMeasure(rng.normal(size=(4, 2)), rng.dirichlet(np.ones(4)))
    exact = exact_wasserstein(mu, nu).value
    gaps = [abs(sinkhorn(mu, nu, epsilon=e).value - exact) for e in (1.0, 0.1, 0.01)]
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_sinkhorn_nonconvergence_reports_flag():
    rng = np.random.default_rng(12)
    mu = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
    nu = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
    res = sinkhorn(mu, nu, epsilon=1e-4, max_iters=3, scaling=False)
    assert not res.converged
    assert res.plan.shape == (5, 5)


def test_sinkhorn_epsilon_contract():
    mu = uniform_measure(np.zeros((2, 1)))
    with pytest.raises(ContractError):
        sinkhorn(mu, mu, epsilon=0.0)


def test_pushforward_identity_constant_scale():
    mu = DiscreteMeasure(np.array([[1.0], [2.0]]), [0.5, 0.5])
    same = pushforward(lambda x: x, mu)
    assert np.array_equal(same.support, mu.support)
    assert np.array_equal(same.weights, mu.weights)

    const = pushforward(lambda x: np.zeros(1), mu)
    assert np.array_equal(const.support, np.zeros((2, 1), dtype=np.float32))
    assert len(const) == 2  # coincident images kept separate

    doubled = pushforward(lambda x: 2 * x, mu)
    assert np.array_equal(doubled.support, np.array([[2.0], [4.0]], dtype=np.float32))


def test_support_gradient_closed_forms():
    mu = DiscreteMeasure(np.array([[1.0, 2.0]]), [1.0])
    res = exact_wasserstein(mu, mu)
    assert np.allclose(support_gradient(mu, mu, res.plan), 0.0)

    x = np.array([[1.0, -1.0]])
    y = np.array([[0.5, 2.0]])
    mu2, nu2 = DiscreteMeasure(x, [1.0]), DiscreteMeasure(y, [1.0])
    res2 = exact_wasserstein(mu2, nu2)
    g = support_gradient(mu2, nu2, res2.plan)
    assert np.allclose(g, 2 * (x - y), atol=1e-6)


def test_support_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    a = rng.dirichlet(np.ones(4))
    b = rng.dirichlet(np.ones(3))
    base = rng.normal(size=(4, 2))
    pts_y = rng.normal(size=(3, 2))
    eps = 0.05

    def value(pts):
        return sinkhorn(DiscreteMeasure(pts, a), DiscreteMeasure(pts_y, b), epsilon=eps).value

    mu = DiscreteMeasure(base, a)
    nu = DiscreteMeasure(pts_y, b)
    res = sinkhorn(mu, nu, epsilon=eps)
    analytic = support_gradient(mu, nu, res.plan)
    numeric = np.zeros_like(base)
    h = 1e-4
    for i in range(4):
        for j in range(2):
            up, down = base.copy(), base.copy()
            up[i, j] += h
            down[i, j] -= h
            numeric[i, j] = (value(up) - value(down)) / (2 * h)
    rel = np.abs(analytic - numeric).max() / np.abs(numeric).max()
    assert rel < 1e-2


def test_support_gradient_unknown_kind():
    mu = uniform_measure(np.zeros((2, 1)))
    with pytest.raises(ContractError):
        support_gradient(mu, mu, np.eye(2) / 2, kind="cosine")
