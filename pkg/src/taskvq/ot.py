"""Discrete-measure algebra and Wasserstein distances.

Two solvers are exposed: an exact LP solve of the Kantorovich problem (used
for verification and small instances) and a log-domain Sinkhorn iteration with
epsilon scaling (used inside training losses). All inner accumulation is in
float64; measure supports stay float32 like the rest of the package.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .validation import ContractError, ShapeError, check_matrix, check_weights

COST_KINDS = ("sqeuclidean", "euclidean")


@dataclass
class DiscreteMeasure:
    """Finitely supported probability measure: points [n, d], weights on the simplex."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.support = check_matrix(self.support, "support")
        self.weights = check_weights(self.weights, "weights")
        if self.support.shape[0] != self.weights.shape[0]:
            raise ShapeError("support and weights disagree on n")
        if self.support.shape[0] < 1:
            raise ContractError("measure needs at least one support point")

    def __len__(self):
        return self.support.shape[0]

    @property
    def dim(self):
        return self.support.shape[1]


def uniform_measure(points):
    points = check_matrix(points, "points")
    n = points.shape[0]
    return DiscreteMeasure(points, np.full(n, 1.0 / n))


def pushforward(f, mu):
    """Apply a map to every support point; weights untouched, images never merged."""
    images = np.stack([np.asarray(f(x), dtype=np.float32).reshape(-1) for x in mu.support])
    return DiscreteMeasure(images, mu.weights.copy())


@dataclass
class CostMatrix:
    values: np.ndarray
    kind: str = "sqeuclidean"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("cost matrix must be 2-D")
        if self.kind in COST_KINDS and np.any(self.values < -1e-12):
            raise ContractError("metric costs must be nonnegative")


def pairwise_cost(xs, ys, kind="sqeuclidean"):
    """Cost matrix between row sets, computed in float64."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    if ys.ndim == 1:
        ys = ys[:, None]
    d2 = (
        np.sum(xs * xs, axis=1)[:, None]
        - 2.0 * xs @ ys.T
        + np.sum(ys * ys, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    if kind == "sqeuclidean":
        return CostMatrix(d2, kind)
    if kind == "euclidean":
        return CostMatrix(np.sqrt(d2), kind)
    raise ContractError(f"unknown cost kind {kind!r}")


def cost_between(mu, nu, kind="sqeuclidean"):
    return pairwise_cost(mu.support, nu.support, kind)


@dataclass
class OtResult:
    value: float
    plan: np.ndarray
    dual_mu: np.ndarray
    dual_nu: np.ndarray
    converged: bool = True
    iterations: int = 0


def _check_dims(mu, nu, cost):
    n, m = len(mu), len(nu)
    if cost.values.shape != (n, m):
        raise ShapeError(f"cost shape {cost.values.shape} vs measures ({n}, {m})")


def exact_wasserstein(mu, nu, cost=None, kind="sqeuclidean"):
    """Solve the Kantorovich LP exactly; returns optimal value, plan and duals."""
    if cost is None:
        cost = cost_between(mu, nu, kind)
    _check_dims(mu, nu, cost)
    n, m = len(mu), len(nu)
    c = cost.values.reshape(-1)

    # row-sum and column-sum equality constraints over the flattened plan
    rows_i = np.repeat(np.arange(n), m)
    cols_i = np.tile(np.arange(m), n)
    var_i = np.arange(n * m)
    a_eq = sparse.csr_matrix(
        (
            np.ones(2 * n * m),
            (np.concatenate([rows_i, n + cols_i]), np.concatenate([var_i, var_i])),
        ),
        shape=(n + m, n * m),
    )
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise ContractError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(n, m)
    duals = np.asarray(res.eqlin.marginals)
    return OtResult(float(res.fun), plan, duals[:n], duals[n:])


def round_to_feasible(plan, a, b):
    """Project a nearly feasible plan onto the transport polytope.

    Rows and columns are scaled down where they overshoot, then the missing
    mass is re-added as a rank-one term. The result satisfies both marginals
    to float64 rounding.
    """
    p = np.asarray(plan, dtype=np.float64).copy()
    rs = p.sum(axis=1)
    p *= np.minimum(1.0, np.divide(a, rs, out=np.ones_like(rs), where=rs > 0))[:, None]
    cs = p.sum(axis=0)
    p *= np.minimum(1.0, np.divide(b, cs, out=np.ones_like(cs), where=cs > 0))[None, :]
    res_a = a - p.sum(axis=1)
    res_b = b - p.sum(axis=0)
    missing = res_a.sum()
    if missing > 0:
        p += np.outer(res_a, res_b) / missing
    return p


def sinkhorn(mu, nu, cost=None, epsilon=0.01, kind="sqeuclidean", max_iters=20000,
             stop_tol=1e-6, scaling=True):
    """Entropic OT in the log domain with epsilon scaling and warm starts.

    Returns plan/value of the entropic optimum; `value` is the transport cost
    <C, P> of the returned plan (converges to the exact value as epsilon -> 0).
    The final plan is rounded onto the transport polytope, so its marginals
    are exact regardless of where the iteration stopped. Non-convergence is
    reported via the flag, never raised.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    if cost is None:
        cost = cost_between(mu, nu, kind)
    _check_dims(mu, nu, cost)
    c = cost.values
    with np.errstate(divide="ignore"):
        loga = np.log(mu.weights)
        logb = np.log(nu.weights)

    if scaling:
        levels = []
        top = max(float(c.mean()), epsilon)
        while top > epsilon * 1.5:
            levels.append(top)
            top /= 2.0
        levels.append(epsilon)
    else:
        levels = [epsilon]

    f = np.zeros(len(mu))
    g = np.zeros(len(nu))
    iters = 0
    converged = False
    for level, eps in enumerate(levels):
        final = level == len(levels) - 1
        tol = stop_tol if final else max(stop_tol, 1e-3)
        while iters < max_iters:
            iters += 1
            g = eps * (logb - _lse((f[:, None] - c) / eps, axis=0))
            f = eps * (loga - _lse((g[None, :] - c) / eps, axis=1))
            # rows are now exact; convergence is the column-marginal violation
            logcol = g / eps + _lse((f[:, None] - c) / eps, axis=0)
            err = np.abs(np.exp(logcol) - nu.weights).max()
            if err < tol:
                converged = final
                break

    eps = levels[-1]
    with np.errstate(invalid="ignore"):
        plan = np.exp((f[:, None] + g[None, :] - c) / eps)
    plan = round_to_feasible(np.nan_to_num(plan, nan=0.0), mu.weights, nu.weights)
    value = float((plan * c).sum())
    return OtResult(value, plan, f, g, converged=converged, iterations=iters)


def _lse(m, axis):
    hi = np.max(m, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    out = np.log(np.sum(np.exp(m - hi), axis=axis)) + np.squeeze(hi, axis=axis)
    return out


def support_gradient(mu, nu, plan, kind="sqeuclidean", side="mu"):
    """Envelope-theorem gradient of <C, P> w.r.t. one side's support points.

    The plan is treated as a constant, so this is exact for the LP value and
    the standard detached-plan approximation for Sinkhorn.
    """
    xs = mu.support.astype(np.float64)
    ys = nu.support.astype(np.float64)
    p = np.asarray(plan, dtype=np.float64)
    if kind == "sqeuclidean":
        if side == "mu":
            # sum_j P_ij * 2 (x_i - y_j)
            return 2.0 * (p.sum(axis=1)[:, None] * xs - p @ ys)
        return 2.0 * (p.sum(axis=0)[:, None] * ys - p.T @ xs)
    if kind == "euclidean":
        diff = xs[:, None, :] - ys[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        unit = diff / np.maximum(dist, 1e-12)[:, :, None]
        if side == "mu":
            return np.einsum("nm,nmd->nd", p, unit)
        return -np.einsum("nm,nmd->md", p, unit)
    raise ContractError(f"no support gradient for cost kind {kind!r}")


def plan_marginal_error(plan, mu, nu):
    """Max absolute violation of the two marginal constraints."""
    p = np.asarray(plan, dtype=np.float64)
    return max(
        float(np.abs(p.sum(axis=1) - mu.weights).max()),
        float(np.abs(p.sum(axis=0) - nu.weights).max()),
    )
