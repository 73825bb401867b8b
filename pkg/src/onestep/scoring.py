"""One-step-train utility scoring.

For a sample ``z_i`` at parameters ``theta`` and anchor set ``V``:

* exact utility ``delta_i = L_V(theta) - L_V(theta - eta * g_i)``;
* first-order score ``s_i = g_V^T g_i`` (``delta_i ~= eta * s_i``).

Positive values mark samples whose gradient step lowers the anchor loss.
The certificate helpers check, numerically, the second-order remainder
bound, the step size under which ``s`` and ``delta`` order every pair with
a given score gap identically, and the drift radius under which the ``s``
order survives continued training.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy import stats

from . import models
from .datasets import as_dataset, check_disjoint, rng_stream
from .errors import (
    DegenerateInputs,
    DegenerateVariance,
    DriftExceeded,
    IdSetMismatch,
    NonFinite,
    OSTError,
)
from .numeric import check_symmetric, dot

logger = logging.getLogger(__name__)

MODES = ("inner_product", "exact_delta", "both")
REMAINDER_SLACK = 1e-10
CHUNK_SIZE = 512


def default_eta(grad_norm):
    return 1e-3 / max(1.0, grad_norm)


@dataclass
class UtilityRecord:
    sample_id: int
    s: Optional[float]
    delta: Optional[float] = None
    eta: Optional[float] = None
    grad_norm: float = float("nan")
    scoring_index: int = -1
    if_score: Optional[float] = None
    loo: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class TheoremCertificate:
    theorem: str
    holds: bool
    beta: Optional[float] = None
    gamma: Optional[float] = None
    eta: Optional[float] = None
    eta_max: Optional[float] = None
    margin_M0: Optional[float] = None
    drift_R: Optional[float] = None
    bound_constants: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, default=float)


@dataclass
class AlignmentEstimate:
    alpha: float
    epsilon_hat: float
    rank_corr: float
    slope: float
    intercept: float


# single-sample utilities


def ost_exact(spec, theta, z_i, anchor, eta, base_loss=None):
    """Anchor-loss reduction after one SGD step of size ``eta`` on ``z_i``.

    ``theta`` is never modified; the stepped parameters live in a copy that
    is discarded on return.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    g_i = models.grad(spec, theta, z_i)
    if base_loss is None:
        base_loss = models.loss(spec, theta, anchor)
    with np.errstate(over="ignore", invalid="ignore"):
        stepped = theta - eta * g_i
        if not np.all(np.isfinite(stepped)):
            raise NonFinite("one-step update overflowed")
        delta = base_loss - models.loss(spec, stepped, anchor)
    if not np.isfinite(delta):
        raise NonFinite(f"anchor loss is not finite after a step of size {eta}")
    return delta


def ost_score(spec, theta, z_i, anchor, anchor_grad=None):
    """Gradient inner product ``g_V^T g_i``; no parameter update is made."""
    if anchor_grad is None:
        anchor_grad = models.grad(spec, theta, anchor)
    return dot(anchor_grad, models.grad(spec, theta, z_i))


def _dense_spectral_norm(H):
    # exact for the dense Hessians used here; power iteration stalls when
    # the top eigenvalues cluster (saturated softmax) and can only undershoot
    check_symmetric(H)
    return float(np.max(np.abs(scipy.linalg.eigvalsh(H))))


def segment_smoothness(spec, theta, step, anchor, n_points=5):
    """Largest anchor-Hessian spectral norm at ``n_points`` along ``[theta, theta + step]``."""
    return max(
        _dense_spectral_norm(models.hessian(spec, theta + t * step, anchor))
        for t in np.linspace(0.0, 1.0, n_points)
    )


def remainder_certificate(spec, theta, z_i, anchor, eta):
    """Check ``|delta - eta*s| <= beta*eta^2/2 * ||g_i||^2`` with ``beta``
    estimated on the step segment."""
    theta = np.asarray(theta, dtype=np.float64)
    g_i = models.grad(spec, theta, z_i)
    g_V = models.grad(spec, theta, anchor)
    s = dot(g_V, g_i)
    delta = ost_exact(spec, theta, z_i, anchor, eta)
    beta = segment_smoothness(spec, theta, -eta * g_i, anchor)
    sq = dot(g_i, g_i)
    bound = 0.5 * beta * eta**2 * sq
    remainder = delta - eta * s
    return TheoremCertificate(
        theorem="remainder",
        holds=bool(abs(remainder) <= bound + REMAINDER_SLACK),
        beta=beta,
        eta=eta,
        details={
            "delta": delta,
            "linear_term": eta * s,
            "remainder": remainder,
            "bound": bound,
            "grad_norm_sq": sq,
        },
    )


def consistency_eta_bound(g_i, g_j, gamma, beta):
    """Largest step for which a score gap of ``gamma`` forces the same
    order on ``delta``: ``2*gamma / (beta * (|g_i|^2 + |g_j|^2))``.

    ``g_i``/``g_j`` may be gradient vectors or their norms.
    """
    ni = _norm_sq(g_i)
    nj = _norm_sq(g_j)
    if not gamma > 0:
        raise DegenerateInputs("gamma must be positive")
    if not beta > 0:
        raise DegenerateInputs("beta must be positive")
    if ni + nj == 0:
        raise DegenerateInputs("both gradients are zero")
    return 2.0 * gamma / (beta * (ni + nj))


def _norm_sq(g):
    g = np.asarray(g, dtype=np.float64)
    return float(g * g) if g.ndim == 0 else dot(g, g)


def consistency_check(records, gamma, beta):
    """Count order disagreements between ``s`` and ``delta`` over all pairs
    whose score gap is at least ``gamma`` and whose common step size lies
    within the pair's bound.

    Returns a certificate; ``holds`` means zero inversions.
    """
    recs = [r for r in records if r.ok and r.s is not None and r.delta is not None]
    s = np.array([r.s for r in recs])
    d = np.array([r.delta for r in recs])
    eta = np.array([r.eta for r in recs])
    sq = np.array([r.grad_norm for r in recs]) ** 2
    i, j = np.triu_indices(len(recs), 1)
    gap = np.abs(s[i] - s[j])
    same_eta = eta[i] == eta[j]
    eta_max = 2.0 * gamma / (beta * (sq[i] + sq[j]))
    eligible = (gap >= gamma) & same_eta & (eta[i] <= eta_max)
    inverted = eligible & (np.sign(s[i] - s[j]) != np.sign(d[i] - d[j]))
    return TheoremCertificate(
        theorem="ranking_consistency",
        holds=bool(not inverted.any()),
        beta=float(beta),
        gamma=float(gamma),
        eta=float(eta.max()) if eta.size else None,
        eta_max=float(eta_max[eligible].min()) if eligible.any() else None,
        details={
            "pairs_total": int(i.size),
            "pairs_checked": int(eligible.sum()),
            "inversions": int(inverted.sum()),
        },
    )


# stability under drift


@dataclass
class StabilityConstants:
    """Gradient-norm and Lipschitz constants over a ball of radius ``radius``.

    ``B`` and ``L`` are keyed by sample id. Gradient-norm bounds are
    ``|g(theta_0)| + L * radius``, which hold on the whole ball whenever
    the Lipschitz constants do.
    """

    L_V: float
    B_V: float
    L: dict
    B: dict
    radius: float
    measured_drift: float
    method: str


def _probe_directions(n_params, n_probes, seed):
    U = rng_stream(seed, "probe").standard_normal((n_probes, n_params))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def estimate_stability_constants(
    spec, theta_0, theta_t, pool, anchor, radius=None, ids=None, method="auto", n_probes=20, seed=0
):
    """Bound constants for the drift certificate.

    ``method="exact"`` (default for the squared loss, whose Hessians do not
    depend on ``theta``) takes Lipschitz constants as Hessian spectral
    norms. ``method="probe"`` takes the largest gradient-change ratio over
    ``n_probes`` random directions of length ``radius`` around ``theta_0``;
    this is an estimate from below, recorded as such.
    """
    pool = as_dataset(pool)
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    drift = float(np.linalg.norm(np.asarray(theta_t) - theta_0))
    radius = drift if radius is None else float(radius)
    sub = pool if ids is None else pool.select_ids(ids)
    if method == "auto":
        method = "exact" if spec.loss_family == models.SQUARED else "probe"
    g_V0 = models.grad(spec, theta_0, anchor)
    G0 = models.per_sample_grads(spec, theta_0, sub)
    if method == "exact":
        L_V = _dense_spectral_norm(models.hessian(spec, theta_0, anchor))
        # one-sample squared-loss Hessian: kron(2 x x^T, I) + lambda M
        L = [
            _dense_spectral_norm(models.hessian(spec, theta_0, sub.take([r])))
            for r in range(sub.n)
        ]
    elif method == "probe":
        L_V, L = 0.0, np.zeros(sub.n)
        if radius > 0:
            for u in _probe_directions(spec.n_params, n_probes, seed):
                theta = theta_0 + radius * u
                L_V = max(L_V, float(np.linalg.norm(models.grad(spec, theta, anchor) - g_V0)) / radius)
                dG = models.per_sample_grads(spec, theta, sub) - G0
                L = np.maximum(L, np.linalg.norm(dG, axis=1) / radius)
    else:
        raise ValueError(f"unknown method {method!r}")
    L = np.asarray(L, dtype=np.float64)
    B = np.linalg.norm(G0, axis=1) + L * radius
    ids_ = sub.sample_ids.tolist()
    return StabilityConstants(
        L_V=float(L_V),
        B_V=float(np.linalg.norm(g_V0)) + float(L_V) * radius,
        L=dict(zip(ids_, L.tolist())),
        B=dict(zip(ids_, B.tolist())),
        radius=radius,
        measured_drift=drift,
        method=method if method == "exact" else f"probe({n_probes} directions)",
    )


def stability_threshold(constants, i, j, drift_R):
    c = constants
    return 2.0 * (c.L_V * (c.B[i] + c.B[j]) + (c.L[i] + c.L[j]) * c.B_V) * drift_R


def stability_certificate(records_t0, records_t, pair, bound_constants, drift_R):
    """Drift certificate for one pair of samples.

    ``holds`` is true when the initial margin exceeds
    ``2 [L_V (B_i + B_j) + (L_i + L_j) B_V] R``; only then does the
    certificate claim the initial order survives, and
    ``details["order_preserved"]`` reports whether it did. Below the
    threshold the certificate abstains.
    """
    c = bound_constants
    if c.measured_drift > drift_R * (1 + 1e-12):
        raise DriftExceeded(f"parameter drift {c.measured_drift:.3e} exceeds R = {drift_R:.3e}")
    by_id0 = {r.sample_id: r for r in records_t0}
    by_idt = {r.sample_id: r for r in records_t}
    i, j = pair
    s_i0, s_j0 = by_id0[i].s, by_id0[j].s
    s_it, s_jt = by_idt[i].s, by_idt[j].s
    margin = s_i0 - s_j0
    threshold = stability_threshold(c, i, j, drift_R)
    holds = abs(margin) > threshold and margin != 0
    preserved = bool(np.sign(s_it - s_jt) == np.sign(margin)) if holds else None
    return TheoremCertificate(
        theorem="ranking_stability",
        holds=bool(holds),
        margin_M0=margin,
        drift_R=drift_R,
        bound_constants={
            "L_V": c.L_V,
            "B_V": c.B_V,
            "L_i": c.L[i],
            "L_j": c.L[j],
            "B_i": c.B[i],
            "B_j": c.B[j],
            "method": c.method,
        },
        details={"threshold": threshold, "margin_t": s_it - s_jt, "order_preserved": preserved},
    )


def stability_violations(records_t0, records_t, constants, drift_R):
    """Vectorised stability check over all pairs.

    Returns ``(n_certified, n_violations)``: pairs whose margin clears the
    threshold, and among those, pairs whose order flipped.
    """
    ids = [r.sample_id for r in records_t0]
    by_idt = {r.sample_id: r.s for r in records_t}
    s0 = np.array([r.s for r in records_t0])
    st = np.array([by_idt[i] for i in ids])
    L = np.array([constants.L[i] for i in ids])
    B = np.array([constants.B[i] for i in ids])
    i, j = np.triu_indices(len(ids), 1)
    thr = 2.0 * (constants.L_V * (B[i] + B[j]) + (L[i] + L[j]) * constants.B_V) * drift_R
    m0 = s0[i] - s0[j]
    cert = (np.abs(m0) > thr) & (m0 != 0)
    flipped = cert & (np.sign(st[i] - st[j]) != np.sign(m0))
    return int(cert.sum()), int(flipped.sum())


# pool scoring


def _processing_order(n, order_seed):
    if order_seed is None:
        return np.arange(n)
    return rng_stream(order_seed, "order").permutation(n)


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def score_pool(
    spec, theta, pool, anchor, mode="inner_product", eta=None, order_seed=None, workers=1
):
    """Score every pool sample; returns records in pool row order.

    ``eta=None`` uses ``1e-3 / max(1, |g_i|)`` per sample for the exact
    utility. ``order_seed`` shuffles the processing order, which
    ``scoring_index`` records. Values never depend on processing order or
    ``workers``: the anchor gradient is computed once, per-sample work is
    independent, and vectorised work runs over fixed row blocks.

    Per-sample numeric failures are recorded on the record (``error``) with
    missing values rather than aborting the pass.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    pool = as_dataset(pool)
    check_disjoint(pool, anchor)
    theta = np.asarray(theta, dtype=np.float64)
    n = pool.n
    order = _processing_order(n, order_seed)
    scoring_index = np.empty(n, dtype=int)
    scoring_index[order] = np.arange(n)
    g_V = models.grad(spec, theta, anchor)
    blocks = [np.arange(a, min(a + CHUNK_SIZE, n)) for a in range(0, n, CHUNK_SIZE)]

    def block_stats(rows):
        sub = pool.take(rows)
        s = models.per_sample_grad_dots(spec, theta, sub, g_V)
        norms = models.per_sample_grad_norms(spec, theta, sub)
        return s, norms

    parts = _map(block_stats, blocks, workers)
    s_all = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
    norms = np.concatenate([p[1] for p in parts]) if parts else np.empty(0)

    records = [
        UtilityRecord(
            sample_id=int(pool.sample_ids[r]),
            s=float(s_all[r]) if mode != "exact_delta" else None,
            grad_norm=float(norms[r]),
            scoring_index=int(scoring_index[r]),
        )
        for r in range(n)
    ]
    if mode == "inner_product":
        return records

    Xa, R, ridge = models.output_residuals(spec, theta, pool)
    base_loss = models.loss(spec, theta, anchor)
    anchor_data = as_dataset(anchor)

    def one(r):
        rec = records[r]
        g_i = np.outer(Xa[r], R[r]).ravel() + ridge
        step = eta if eta is not None else default_eta(rec.grad_norm)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                stepped = theta - step * g_i
                if not np.all(np.isfinite(stepped)):
                    raise NonFinite("one-step update overflowed")
                delta = base_loss - models.loss(spec, stepped, anchor_data)
            if not np.isfinite(delta):
                raise NonFinite(f"anchor loss is not finite after a step of size {step}")
            return r, step, delta, None
        except OSTError as exc:
            return r, step, None, f"{type(exc).__name__}: {exc}"

    chunks = np.array_split(order, max(1, workers))
    results = _map(lambda rows: [one(r) for r in rows], chunks, workers)
    for chunk in results:
        for r, step, delta, err in chunk:
            rec = records[r]
            rec.eta, rec.delta, rec.error = step, delta, err
            if err is not None:
                rec.s = None
    return records


# proxy transfer


def fit_alignment(proxy_records, target_records):
    """Least-squares fit ``s_target = a * s_proxy + b`` over shared sample ids.

    ``alpha = sqrt(max(a, 0))`` is the gradient scaling between the models,
    ``epsilon_hat`` the RMS residual and ``rank_corr`` the Spearman
    correlation of the two score lists.
    """
    p = {r.sample_id: r.s for r in proxy_records}
    t = {r.sample_id: r.s for r in target_records}
    if set(p) != set(t):
        raise IdSetMismatch("proxy and target records cover different sample ids")
    ids = sorted(p)
    x = np.array([p[i] for i in ids], dtype=np.float64)
    y = np.array([t[i] for i in ids], dtype=np.float64)
    if np.ptp(x) == 0:
        raise DegenerateVariance("proxy scores are constant")
    A = np.column_stack([x, np.ones_like(x)])
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (a * x + b)
    rho = stats.spearmanr(x, y).statistic if np.ptp(y) > 0 else 0.0
    return AlignmentEstimate(
        alpha=float(np.sqrt(max(a, 0.0))),
        epsilon_hat=float(np.sqrt(np.mean(resid**2))),
        rank_corr=float(rho),
        slope=float(a),
        intercept=float(b),
    )


# serialisation


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_records_csv(path, records, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "s", "delta", "eta", "grad_norm", "scoring_index"])
        for r in records:
            w.writerow(
                [r.sample_id, _fmt(r.s), _fmt(r.delta), _fmt(r.eta), _fmt(r.grad_norm), r.scoring_index]
            )


def read_records_csv(path):
    def opt(v):
        return float(v) if v != "" else None

    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return [
        UtilityRecord(int(r[0]), opt(r[1]), opt(r[2]), opt(r[3]), float(r[4]), int(r[5]))
        for r in rows[1:]
    ]


def write_certificates_json(path, certificates):
    payload = [asdict(c) for c in certificates]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
