"""Leave-one-out retraining and influence-function baselines.

Sign convention, shared with the one-step scores: positive means the
sample is helpful, i.e. removing it raises the anchor loss.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import models
from .datasets import as_dataset
from .errors import SingularSystem
from .numeric import DEFAULT_DAMPING, DENSE_SOLVE_MAX_DIM, conjugate_gradient, dot, solve_damped

logger = logging.getLogger(__name__)


@dataclass
class OracleScore:
    sample_id: int
    loo_delta: float = float("nan")
    if_score: float = float("nan")
    method_meta: dict = field(default_factory=dict)


def loo_exact(spec, pool, anchor, opts, i, theta_hat=None, *, full_output=False):
    """``L_V(theta_{-i}) - L_V(theta_hat)`` by retraining without sample ``i``.

    Both trainings run at ``opts.grad_norm_tol / 10``; the leave-one-out
    fit is warm-started from ``theta_hat``. Pass ``theta_hat`` to reuse a
    full-pool fit across many calls (it must come from the same tightened
    options to keep the result reproducible).
    """
    tight = opts.tightened()
    if theta_hat is None:
        theta_hat = models.train(spec, pool, tight)
    theta_minus, info = models.train(spec, pool.without(i), tight, init=theta_hat, full_output=True)
    delta = models.loss(spec, theta_minus, anchor) - models.loss(spec, theta_hat, anchor)
    return (delta, info) if full_output else delta


def loo_exact_many(spec, pool, anchor, opts, ids=None, workers=1, theta_hat=None):
    """Exact leave-one-out deltas for ``ids`` (default: whole pool).

    Returns ``(deltas, iterations)`` aligned with ``ids``. Every retraining
    is independent, so the result does not depend on ``workers``.
    """
    ids = pool.sample_ids if ids is None else np.asarray(ids)
    if theta_hat is None:
        theta_hat = models.train(spec, pool, opts.tightened())

    def one(i):
        delta, info = loo_exact(spec, pool, anchor, opts, int(i), theta_hat, full_output=True)
        return delta, info.iterations

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(one, ids))
    else:
        out = [one(i) for i in ids]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out], dtype=int)


def _ridge_system(spec, pool):
    if spec.loss_family != models.SQUARED:
        raise ValueError("closed-form leave-one-out needs the squared-error family")
    pool = as_dataset(pool)
    Xa = models.augment(pool.features)
    Y = models._onehot(pool.labels, spec.num_classes)
    return Xa, Y


def ridge_solution(spec, pool):
    """Exact minimiser of the ridge objective via the normal equations."""
    Xa, Y = _ridge_system(spec, pool)
    n = Xa.shape[0]
    mask = spec.penalty_mask().reshape(-1, spec.num_classes)[:, 0]
    A = Xa.T @ Xa + 0.5 * n * spec.ridge_lambda * np.diag(mask)
    try:
        W = scipy.linalg.solve(A, Xa.T @ Y, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    return W.ravel()


def loo_ridge_all(spec, pool, anchor, ids=None):
    """Closed-form leave-one-out deltas for the squared-error family.

    Dropping a sample from a pool of ``N`` leaves the normal matrix
    ``B - x x^T`` with ``B = Xa^T Xa + (N-1) lambda/2 M`` shared by every
    removal, so one factorisation of ``B`` and a Sherman-Morrison downdate
    per sample give every refit exactly:
    ``W_{-i} = W_B + u_i (x_i^T W_B - y_i)^T / (1 - h_i)`` with
    ``u_i = B^{-1} x_i`` and ``h_i = x_i^T u_i``.
    """
    pool, anchor = as_dataset(pool), as_dataset(anchor)
    Xa, Y = _ridge_system(spec, pool)
    n, K = Xa.shape[0], spec.num_classes
    rows = np.arange(n) if ids is None else pool.rows_of(ids)
    mask = spec.penalty_mask().reshape(-1, K)[:, 0]
    B = Xa.T @ Xa + 0.5 * (n - 1) * spec.ridge_lambda * np.diag(mask)
    try:
        cho = scipy.linalg.cho_factor(B)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal matrix is not positive definite: {exc}") from exc
    W_B = scipy.linalg.cho_solve(cho, Xa.T @ Y)
    U = scipy.linalg.cho_solve(cho, Xa[rows].T).T  # u_i as rows
    h = np.sum(U * Xa[rows], axis=1)
    if np.any(1.0 - h <= 1e-12):
        raise SingularSystem("a sample has leverage 1; removing it makes the system singular")
    E = (Xa[rows] @ W_B - Y[rows]) / (1.0 - h)[:, None]  # (m, K)

    theta_hat = ridge_solution(spec, pool)
    base = models.loss(spec, theta_hat, anchor)
    Xv = models.augment(anchor.features)
    Yv = models._onehot(anchor.labels, K)
    Zv = Xv @ W_B - Yv  # (M, K)
    XvU = Xv @ U.T  # (M, m)
    out = np.empty(rows.size)
    for j in range(rows.size):
        R = Zv + np.outer(XvU[:, j], E[j])
        W = W_B + np.outer(U[j], E[j])
        penalty = 0.5 * spec.ridge_lambda * np.sum(W[:-1] ** 2)
        out[j] = np.mean(np.sum(R * R, axis=1)) + penalty - base
    return out


def loo_ridge_closed_form(spec, pool, anchor, i):
    return float(loo_ridge_all(spec, pool, anchor, ids=[i])[0])


def _inverse_hessian_apply(spec, theta_hat, pool, v, damping):
    if spec.n_params <= DENSE_SOLVE_MAX_DIM:
        return solve_damped(models.hessian(spec, theta_hat, pool), v, damping)
    return conjugate_gradient(
        lambda x: models.hvp(spec, theta_hat, pool, x), v, damping=damping, tol=1e-10
    )


def influence(spec, theta_hat, pool, anchor, i, damping=DEFAULT_DAMPING):
    """Influence of one sample, ``g_V^T (H + damping I)^{-1} g_i``.

    This is the classical influence-function value with its sign flipped so
    that a positive score, like a positive leave-one-out delta, marks a
    sample whose removal would raise the anchor loss.
    """
    g_V = models.grad(spec, theta_hat, anchor)
    g_i = models.grad(spec, theta_hat, as_dataset(pool).sample(i))
    return dot(g_V, _inverse_hessian_apply(spec, theta_hat, pool, g_i, damping))


def influence_from_anchor_grad(spec, theta_hat, pool, anchor_grad, damping=DEFAULT_DAMPING):
    """Influence scores for every pool sample given the anchor gradient.

    The Hessian is symmetric, so one solve ``u = (H + damping I)^{-1} g_V``
    serves the whole pool: ``score_i = u^T g_i``.
    """
    u = _inverse_hessian_apply(spec, theta_hat, pool, anchor_grad, damping)
    return models.per_sample_grad_dots(spec, theta_hat, pool, u)


def influence_scores(spec, theta_hat, pool, anchor, damping=DEFAULT_DAMPING):
    g_V = models.grad(spec, theta_hat, anchor)
    return influence_from_anchor_grad(spec, theta_hat, pool, g_V, damping)


def write_oracle_csv(path, scores, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "loo_delta", "if_score", "damping"])
        for s in scores:
            w.writerow(
                [
                    s.sample_id,
                    _fmt(s.loo_delta),
                    _fmt(s.if_score),
                    _fmt(s.method_meta.get("damping", float("nan"))),
                ]
            )


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))
