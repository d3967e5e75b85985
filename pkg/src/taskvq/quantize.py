"""Codebook learning: nearest-codeword quantization, the straight-through
training path, and the Wasserstein alignment loss that pulls the codebook
toward the encoder's output distribution.

The gradient routing is deliberate and worth stating once: the straight-through
path carries task gradients to the encoder only; codewords and category logits
learn exclusively through the alignment loss, whose backward pass uses the
envelope theorem (transport plan detached) plus the marginal dual variables.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import ot
from .autodiff import Tensor, _node
from .nn import Adam, softmax_np
from .rng import make_rng
from .validation import ContractError, ShapeError, check_matrix

QUANTIZE_METRICS = ("sqeuclidean", "euclidean", "inner_product")


@dataclass
class Codebook:
    """M codewords in latent space plus learnable category-probability logits."""

    codewords: Tensor
    pi_logits: Tensor
    metric: str = "sqeuclidean"

    @property
    def n_codewords(self):
        return self.codewords.data.shape[0]

    @property
    def dim(self):
        return self.codewords.data.shape[1]

    @property
    def pi(self):
        return softmax_np(self.pi_logits.data.astype(np.float64))

    def parameters(self):
        return [("codebook.codewords", self.codewords), ("codebook.pi_logits", self.pi_logits)]

    def state(self):
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state(self, state):
        for name, t in self.parameters():
            t.data = np.asarray(state[name], dtype=np.float32).copy()


def init_codebook(seed, n_codewords, dim, strategy="gaussian", warmup=None):
    """Create a codebook with uniform category logits.

    gaussian: codewords ~ N(0, 1/sqrt(dim)). kmeans++: D^2-sampled from the
    warmup batch (falls back to jittered resampling if the batch is small).
    """
    if n_codewords < 1 or dim < 1:
        raise ContractError("n_codewords and dim must be >= 1")
    rng = make_rng(seed, "codebook-init")
    if strategy == "gaussian":
        words = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_codewords, dim))
    elif strategy == "kmeans++":
        if warmup is None:
            raise ContractError("kmeans++ init needs a warmup batch")
        words = _kmeanspp(check_matrix(warmup, "warmup", n_cols=dim), n_codewords, rng)
    else:
        raise ContractError(f"unknown init strategy {strategy!r}")
    words = words.astype(np.float32)
    # coincident codewords would make assignments degenerate from step one
    for _ in range(8):
        d = ot.pairwise_cost(words, words).values
        np.fill_diagonal(d, np.inf)
        dup = np.argwhere(d <= 0.0)
        if dup.size == 0:
            break
        for i, _ in dup:
            words[i] += rng.normal(0.0, 1e-4 / np.sqrt(dim), size=dim).astype(np.float32)
    return Codebook(
        codewords=Tensor(words, requires_grad=True, name="codebook.codewords"),
        pi_logits=Tensor(np.zeros(n_codewords, dtype=np.float32), requires_grad=True,
                         name="codebook.pi_logits"),
    )


def _kmeanspp(batch, k, rng):
    n = batch.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ot.pairwise_cost(batch, batch[chosen]).values.min(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            # batch exhausted / duplicated points: jitter a random existing pick
            base = batch[int(rng.integers(n))]
            jitter = rng.normal(0.0, 1e-3, size=batch.shape[1])
            extra = base + jitter
            batch = np.vstack([batch, extra.astype(np.float32)])
            d2 = np.append(d2, 1.0)
            chosen.append(batch.shape[0] - 1)
            continue
        idx = int(rng.choice(batch.shape[0], p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ot.pairwise_cost(batch, batch[[idx]]).values[:, 0])
    return batch[chosen].copy()


@dataclass
class QuantizationResult:
    indices: np.ndarray
    quantized: np.ndarray
    distances: np.ndarray


def quantize(codebook, z):
    """Exact nearest-codeword assignment; ties break to the lowest index."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError(f"quantize expects [batch, dim], got {data.shape}")
    if data.shape[0] == 0:
        return QuantizationResult(
            np.zeros(0, dtype=np.int64),
            np.zeros((0, codebook.dim), dtype=np.float32),
            np.zeros((0, codebook.n_codewords), dtype=np.float32),
        )
    if data.shape[1] != codebook.dim:
        raise ShapeError(f"latent dim {data.shape[1]} != codebook dim {codebook.dim}")
    words = codebook.codewords.data
    metric = codebook.metric
    if metric == "inner_product":
        dist = -(data.astype(np.float64) @ words.astype(np.float64).T)
    else:
        dist = ot.pairwise_cost(data, words, "sqeuclidean").values
        if metric == "euclidean":
            dist = np.sqrt(dist)
    dist = dist.astype(np.float32)
    indices = np.argmin(dist, axis=1).astype(np.int64)
    return QuantizationResult(indices, words[indices].copy(), dist)


def straight_through(z, result=None, codebook=None):
    """Quantized values forward; gradient passes to z unchanged, none to codewords."""
    if not isinstance(z, Tensor):
        raise ContractError("straight_through needs the encoder output tensor")
    if result is None:
        if codebook is None:
            raise ContractError("pass a QuantizationResult or a codebook")
        result = quantize(codebook, z)
    if result.quantized.shape != z.data.shape:
        raise ShapeError("quantization result does not match z")

    def back(out):
        if z.requires_grad:
            z.accumulate_grad(out.grad)

    return _node(result.quantized.copy(), (z,), back)


def codebook_loss(codebook, z, weight, solver="sinkhorn", epsilon=None,
                  max_iters=2000, stop_tol=1e-6):
    """Wasserstein distance between the minibatch latent distribution and the
    codebook distribution, scaled by `weight`.

    Returns (scalar node, info). Gradients flow to z (envelope), to the
    codewords (as the other support), and to pi_logits (via the dual
    variables chained through the softmax). weight=0 short-circuits to a
    constant zero with no gradient path.
    """
    if weight < 0:
        raise ContractError("weight must be >= 0")
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=np.float32))
    if z.data.ndim != 2 or z.data.shape[0] < 1:
        raise ShapeError("codebook_loss expects a nonempty [batch, dim] tensor")
    if z.data.shape[1] != codebook.dim:
        raise ShapeError("latent dim does not match codebook")
    if weight == 0:
        return Tensor(np.float32(0.0)), {"solver": solver, "converged": True, "iterations": 0}
    if codebook.metric not in ot.COST_KINDS:
        raise ContractError(f"no transport cost for metric {codebook.metric!r}")

    batch = z.data.shape[0]
    pi = codebook.pi
    mu = ot.DiscreteMeasure(z.data, np.full(batch, 1.0 / batch))
    nu = ot.DiscreteMeasure(codebook.codewords.data, pi)
    cost = ot.cost_between(mu, nu, codebook.metric)
    if solver == "exact":
        res = ot.exact_wasserstein(mu, nu, cost)
    elif solver == "sinkhorn":
        eps = epsilon if epsilon is not None else 0.05 * max(float(cost.values.mean()), 1e-12)
        res = ot.sinkhorn(mu, nu, cost, epsilon=eps, max_iters=max_iters, stop_tol=stop_tol)
    else:
        raise ContractError(f"unknown solver {solver!r}")

    info = {"solver": solver, "converged": res.converged, "iterations": res.iterations,
            "value": res.value}
    grad_z = ot.support_gradient(mu, nu, res.plan, codebook.metric, side="mu")
    grad_words = ot.support_gradient(mu, nu, res.plan, codebook.metric, side="nu")
    # dV/d(pi_logits) = J_softmax^T @ dual_nu; shift-invariance of the duals
    # cancels in the Jacobian.
    dual = res.dual_nu
    grad_logits = pi * (dual - float(pi @ dual))
    w = float(weight)
    words_t, logits_t = codebook.codewords, codebook.pi_logits

    def back(out):
        go = float(out.grad)
        if z.requires_grad:
            z.accumulate_grad(go * w * grad_z)
        if words_t.requires_grad:
            words_t.accumulate_grad(go * w * grad_words)
        if logits_t.requires_grad:
            logits_t.accumulate_grad(go * w * grad_logits)

    node = _node(np.float32(w * res.value), (z, words_t, logits_t), back)
    return node, info


class WassersteinVectorQuantizer(BaseEstimator, TransformerMixin):
    """Learns a codebook whose induced discrete distribution matches the data.

    fit(X) runs minibatch Adam on the codewords and category logits,
    minimizing the transport cost between each batch's empirical measure and
    the codebook measure. transform(X) returns quantized vectors, predict(X)
    the codeword indices.
    """

    def __init__(self, n_codewords=8, metric="sqeuclidean", solver="sinkhorn",
                 learning_rate=0.05, n_steps=200, batch_size=256, init="kmeans++",
                 epsilon=None, dead_code_patience=100, random_state=0):
        self.n_codewords = n_codewords
        self.metric = metric
        self.solver = solver
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.init = init
        self.epsilon = epsilon
        self.dead_code_patience = dead_code_patience
        self.random_state = random_state

    def fit(self, X, y=None):
        from .autodiff import gradients  # local import keeps module load light

        X = check_matrix(X, "X")
        rng = make_rng(self.random_state, "wvq-fit")
        warmup = X[rng.choice(X.shape[0], size=min(X.shape[0], 1024), replace=False)]
        cb = init_codebook(self.random_state, self.n_codewords, X.shape[1],
                           strategy=self.init, warmup=warmup)
        cb.metric = self.metric
        opt = Adam(self.learning_rate)
        params = cb.parameters()
        dead_streak = np.zeros(self.n_codewords, dtype=np.int64)
        history = []
        reseeds = 0
        for step in range(self.n_steps):
            take = min(self.batch_size, X.shape[0])
            batch = X[rng.choice(X.shape[0], size=take, replace=False)]
            loss, info = codebook_loss(cb, Tensor(batch), 1.0, solver=self.solver,
                                       epsilon=self.epsilon)
            grads = gradients(loss, params)
            opt.step(params, grads)
            counts = np.bincount(quantize(cb, batch).indices, minlength=self.n_codewords)
            dead_streak = np.where(counts == 0, dead_streak + 1, 0)
            stale = np.nonzero(dead_streak >= self.dead_code_patience)[0]
            for m in stale:
                cb.codewords.data[m] = batch[int(rng.integers(take))]
                dead_streak[m] = 0
                reseeds += 1
            history.append(float(loss.data))
        self.codebook_ = cb
        self.history_ = history
        self.n_reseeds_ = reseeds
        return self

    def _check_fitted(self):
        if not hasattr(self, "codebook_"):
            raise ContractError("call fit before transform/predict")

    def transform(self, X):
        self._check_fitted()
        X = check_matrix(X, "X", n_cols=self.codebook_.dim)
        return quantize(self.codebook_, X).quantized

    def predict(self, X):
        self._check_fitted()
        X = check_matrix(X, "X", n_cols=self.codebook_.dim)
        return quantize(self.codebook_, X).indices
