"""Convex linear models: ridge least squares on one-hot targets and
multinomial logistic regression.

Parameters are a flat vector ``theta`` of length ``(d + 1) * K``. Reshaped
to ``W`` with shape ``(d + 1, K)``, row ``j`` holds the weights of feature
``j`` for every class, and the last row is the (unpenalised) bias.

The objective on a dataset is the mean per-sample loss plus
``ridge_lambda / 2 * ||W[:-1]||^2``. A "per-sample gradient" is the gradient
of that objective evaluated on the one-sample dataset, so it includes the
ridge term and the pool gradient is the mean of the per-sample gradients.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .datasets import as_dataset, rng_stream
from .errors import DidNotConverge, DimensionMismatch, EmptyDataset, TooLargeForDense
from .numeric import DENSE_SOLVE_MAX_DIM

logger = logging.getLogger(__name__)

SQUARED = "squared_error_linear"
LOGISTIC = "multinomial_logistic"
LOSS_FAMILIES = (SQUARED, LOGISTIC)


@dataclass(frozen=True)
class ModelSpec:
    loss_family: str
    num_classes: int
    feature_dim: int
    ridge_lambda: float = 0.0

    def __post_init__(self):
        if self.loss_family not in LOSS_FAMILIES:
            raise ValueError(f"unknown loss family {self.loss_family!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be at least 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be non-negative")

    @property
    def n_params(self):
        return (self.feature_dim + 1) * self.num_classes

    def zeros(self):
        return np.zeros(self.n_params)

    def penalty_mask(self):
        """Flat 0/1 mask selecting the penalised (non-bias) parameters."""
        mask = np.ones((self.feature_dim + 1, self.num_classes))
        mask[-1] = 0.0
        return mask.ravel()


@dataclass(frozen=True)
class TrainOptions:
    grad_norm_tol: float = 1e-8
    max_iters: int = 200_000
    step_rule: str = "backtracking"
    seed: int = 0

    def __post_init__(self):
        if not self.grad_norm_tol > 0:
            raise ValueError("grad_norm_tol must be positive")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")

    def tightened(self, factor=10.0):
        return TrainOptions(self.grad_norm_tol / factor, self.max_iters, self.step_rule, self.seed)


class TrainInfo(NamedTuple):
    iterations: int
    grad_norm: float
    converged: bool


def random_init(spec, seed, scale=0.01):
    return scale * rng_stream(seed, "init").standard_normal(spec.n_params)


def augment(X):
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _unpack(spec, theta, data):
    data = as_dataset(data)
    if data.n == 0:
        raise EmptyDataset("loss is undefined on an empty dataset")
    if data.d != spec.feature_dim:
        raise DimensionMismatch(f"data has {data.d} features, spec expects {spec.feature_dim}")
    if data.num_classes != spec.num_classes:
        raise DimensionMismatch(
            f"data has {data.num_classes} classes, spec expects {spec.num_classes}"
        )
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.size != spec.n_params:
        raise DimensionMismatch(f"theta has length {theta.size}, spec expects {spec.n_params}")
    W = theta.reshape(spec.feature_dim + 1, spec.num_classes)
    return W, augment(data.features), data.labels


def _onehot(y, K):
    Y = np.zeros((y.size, K))
    Y[np.arange(y.size), y] = 1.0
    return Y


def _forward(spec, W, Xa, y):
    """Per-sample losses and output residuals ``dloss/dlogits`` (N x K)."""
    Z = Xa @ W
    Y = _onehot(y, spec.num_classes)
    if spec.loss_family == SQUARED:
        E = Z - Y
        return np.sum(E * E, axis=1), 2.0 * E
    lse = logsumexp(Z, axis=1)
    losses = lse - Z[np.arange(y.size), y]
    return losses, np.exp(Z - lse[:, None]) - Y


def _ridge(spec, W):
    Wm = W.copy()
    Wm[-1] = 0.0
    return Wm


def per_sample_losses(spec, theta, data):
    W, Xa, y = _unpack(spec, theta, data)
    return _forward(spec, W, Xa, y)[0]


def loss(spec, theta, data):
    W, Xa, y = _unpack(spec, theta, data)
    losses, _ = _forward(spec, W, Xa, y)
    Wr = _ridge(spec, W)
    return float(losses.mean() + 0.5 * spec.ridge_lambda * np.sum(Wr * Wr))


def loss_and_grad(spec, theta, data):
    W, Xa, y = _unpack(spec, theta, data)
    losses, R = _forward(spec, W, Xa, y)
    Wr = _ridge(spec, W)
    value = float(losses.mean() + 0.5 * spec.ridge_lambda * np.sum(Wr * Wr))
    G = Xa.T @ R / Xa.shape[0] + spec.ridge_lambda * Wr
    return value, G.ravel()


def grad(spec, theta, data):
    return loss_and_grad(spec, theta, data)[1]


def output_residuals(spec, theta, data):
    """``(Xa, R, ridge_grad)`` such that sample ``n``'s gradient is
    ``outer(Xa[n], R[n]).ravel() + ridge_grad``.

    Lets callers form inner products with per-sample gradients without
    materialising the N x P gradient matrix.
    """
    W, Xa, y = _unpack(spec, theta, data)
    _, R = _forward(spec, W, Xa, y)
    return Xa, R, spec.ridge_lambda * _ridge(spec, W).ravel()


def per_sample_grads(spec, theta, data):
    """N x P matrix whose rows are the per-sample gradients."""
    Xa, R, ridge = output_residuals(spec, theta, data)
    G = (Xa[:, :, None] * R[:, None, :]).reshape(Xa.shape[0], -1)
    return G + ridge


def hessian(spec, theta, data):
    if spec.n_params > DENSE_SOLVE_MAX_DIM:
        raise TooLargeForDense(
            f"{spec.n_params} parameters exceed the dense limit {DENSE_SOLVE_MAX_DIM}"
        )
    W, Xa, y = _unpack(spec, theta, data)
    n, K = Xa.shape[0], spec.num_classes
    D = Xa.shape[1]
    if spec.loss_family == SQUARED:
        H = np.kron((2.0 / n) * (Xa.T @ Xa), np.eye(K))
    else:
        P = softmax(Xa @ W, axis=1)
        XP = (Xa[:, :, None] * P[:, None, :]).reshape(n, D * K)
        H4 = np.zeros((D, K, D, K))
        for k in range(K):
            H4[:, k, :, k] = (Xa * P[:, [k]]).T @ Xa
        H = (H4.reshape(D * K, D * K) - XP.T @ XP) / n
        H = 0.5 * (H + H.T)
    H[np.diag_indices_from(H)] += spec.ridge_lambda * spec.penalty_mask()
    return H


def hvp(spec, theta, data, v):
    W, Xa, y = _unpack(spec, theta, data)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != spec.n_params:
        raise DimensionMismatch(f"vector has length {v.size}, spec expects {spec.n_params}")
    V = v.reshape(W.shape)
    n = Xa.shape[0]
    Z = Xa @ V
    if spec.loss_family == SQUARED:
        out = (2.0 / n) * (Xa.T @ Z)
    else:
        P = softmax(Xa @ W, axis=1)
        T = P * Z - P * np.sum(P * Z, axis=1, keepdims=True)
        out = Xa.T @ T / n
    return (out + spec.ridge_lambda * _ridge(spec, V)).ravel()


def curvature_bound(spec, data):
    """Upper bound on the Hessian spectral norm valid at every ``theta``.

    Softmax output curvature ``diag(p) - p p^T`` has norm at most 1/2; the
    squared loss has output curvature exactly 2.
    """
    data = as_dataset(data)
    Xa = augment(data.features)
    top = float(np.linalg.eigvalsh(Xa.T @ Xa / Xa.shape[0])[-1])
    scale = 2.0 if spec.loss_family == SQUARED else 0.5
    return scale * top + spec.ridge_lambda


def accuracy(spec, theta, data):
    W, Xa, y = _unpack(spec, theta, data)
    return float(np.mean(np.argmax(Xa @ W, axis=1) == y))


def train(spec, data, opts=None, init=None, *, full_output=False, strict=True):
    """Full-batch gradient descent until ``||grad|| <= opts.grad_norm_tol``.

    ``init`` may be a parameter vector, ``None`` (zeros) or ``"random"``
    (small Gaussian drawn from ``opts.seed``). The backtracking rule doubles
    the previous step and halves it until the step no longer passes the
    line minimum, judged by the sign of the directional derivative; unlike
    an Armijo test on loss values this stays reliable when loss differences
    fall below float64 resolution. The fixed rule uses ``1 / L`` with ``L``
    from :func:`curvature_bound`.

    With ``strict=False`` hitting ``max_iters`` returns the current iterate
    instead of raising.
    """
    opts = opts or TrainOptions()
    if init is None:
        theta = spec.zeros()
    elif isinstance(init, str):
        if init != "random":
            raise ValueError(f"unknown init {init!r}")
        theta = random_init(spec, opts.seed)
    else:
        theta = np.array(init, dtype=np.float64).ravel()
    f, g = loss_and_grad(spec, theta, data)
    step = 1.0 / curvature_bound(spec, data)
    gnorm = float(np.linalg.norm(g))
    for it in range(opts.max_iters):
        if gnorm <= opts.grad_norm_tol:
            info = TrainInfo(it, gnorm, True)
            break
        if opts.step_rule == "fixed":
            theta = theta - step * g
            f, g = loss_and_grad(spec, theta, data)
        else:
            step *= 2.0
            while True:
                cand = theta - step * g
                f_c, g_c = loss_and_grad(spec, cand, data)
                if float(g_c @ g) >= 0.0 and np.isfinite(f_c):
                    break
                step *= 0.5
                if step < 1e-300:
                    raise DidNotConverge("line search collapsed", gnorm, it)
            theta, f, g = cand, f_c, g_c
        gnorm = float(np.linalg.norm(g))
    else:
        info = TrainInfo(opts.max_iters, gnorm, gnorm <= opts.grad_norm_tol)
        if not info.converged and strict:
            raise DidNotConverge(
                f"gradient norm {gnorm:.3e} above {opts.grad_norm_tol:.1e} "
                f"after {opts.max_iters} iterations",
                gnorm,
                opts.max_iters,
            )
    logger.debug("train: %d iterations, |grad| = %.3e", info.iterations, info.grad_norm)
    return (theta, info) if full_output else theta


def per_sample_grad_dots(spec, theta, data, v):
    """``G @ v`` for the per-sample gradient matrix ``G`` without forming ``G``."""
    Xa, R, ridge = output_residuals(spec, theta, data)
    V = np.asarray(v, dtype=np.float64).reshape(spec.feature_dim + 1, spec.num_classes)
    return np.sum((Xa @ V) * R, axis=1) + float(ridge @ V.ravel())


def per_sample_grad_norms(spec, theta, data):
    Xa, R, ridge = output_residuals(spec, theta, data)
    Rm = ridge.reshape(spec.feature_dim + 1, spec.num_classes)
    sq = (
        np.sum(Xa * Xa, axis=1) * np.sum(R * R, axis=1)
        + 2.0 * np.sum((Xa @ Rm) * R, axis=1)
        + float(ridge @ ridge)
    )
    return np.sqrt(np.maximum(sq, 0.0))
