"""End-to-end experiment drivers.

Each ``run_*`` function takes an :class:`~onestep.config.ExperimentConfig`
and an output directory, writes its CSV/JSON/SVG artifacts there and
returns an in-memory summary. All randomness flows from the configured
seed, and every written file is byte-identical across reruns and across
worker counts. Wall-clock timings are logged and returned, never written.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models, oracles, reports, scoring, selection
from .datasets import build_anchor, corrupt_labels, generate_mixture, load_idx, rng_stream, split
from .errors import IntractableLOO, NoFlags

logger = logging.getLogger(__name__)


# shared plumbing


@dataclass
class ExperimentData:
    pool: object
    anchor: object
    test: object


def build_data(cfg):
    """Pool, anchor and held-out test split, pairwise id-disjoint.

    Synthetic: one clean mixture is split into test / anchor source / pool
    and only the pool is corrupted. IDX: the pool is the first ``limit``
    training images, the anchor is drawn from the remaining training
    images, and the test split comes from the test files when given.
    """
    d, seed = cfg.data, cfg.experiment.seed
    if d.source == "synthetic":
        total = d.pool_size + d.test_size + d.anchor_source_size
        clean = generate_mixture(d.num_classes, total, d.feature_dim, d.separation, 0.0, seed)
        test, anchor_src, pool = split(clean, [d.test_size, d.anchor_source_size], seed)
    else:
        full = load_idx(d.images, d.labels, num_classes=d.num_classes)
        limit = min(d.limit, full.n - d.anchor_source_size)
        pool = full.take(np.arange(limit))
        rest = full.take(np.arange(limit, full.n))
        if d.test_images and d.test_labels:
            test = load_idx(d.test_images, d.test_labels, num_classes=d.num_classes)
            test = test.take(np.arange(min(d.test_size, test.n)))
            # keep ids disjoint from the training file
            test = type(test)(test.features, test.labels, test.sample_ids + full.n, test.num_classes)
            anchor_src = rest
        else:
            test, anchor_src = split(rest, [min(d.test_size, rest.n - cfg.anchor.size)], seed)
    anchor, _ = build_anchor(anchor_src, cfg.anchor.size, cfg.anchor.strategy, seed)
    # real images carry no ground-truth flags unless noise is injected
    if d.source == "synthetic" or d.noise_rate > 0:
        pool = corrupt_labels(pool, d.noise_rate, seed)
    return ExperimentData(pool, anchor, test)


def model_spec(section, data, feature_dim=None):
    return models.ModelSpec(
        section.loss_family, data.num_classes, feature_dim or data.d, section.ridge_lambda
    )


def train_options(cfg):
    t = cfg.train
    return models.TrainOptions(t.grad_norm_tol, t.max_iters, t.step_rule, cfg.experiment.seed)


def proxy_checkpoint(spec, pool, opts, fraction):
    """Proxy parameters after ``fraction`` of the iterations gradient descent
    needs to converge on ``pool`` from zero.

    Returns ``(theta, iterations_used, iterations_to_convergence)``.
    """
    if fraction <= 0:
        return spec.zeros(), 0, None
    theta_full, info = models.train(spec, pool, opts, full_output=True)
    if fraction >= 1:
        return theta_full, info.iterations, info.iterations
    k = int(round(fraction * info.iterations))
    if k == 0:
        return spec.zeros(), 0, info.iterations
    budget = models.TrainOptions(opts.grad_norm_tol, k, opts.step_rule, opts.seed)
    theta, part = models.train(spec, pool, budget, full_output=True, strict=False)
    return theta, part.iterations, info.iterations


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


class _Timer:
    def __init__(self):
        self.phases = {}

    def phase(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = time.perf_counter() - self.t0
                logger.info("%s: %.2fs", name, timer.phases[name])

        return _Ctx()


def _out(out_dir):
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ptag(p):
    return f"{p:g}"


# pipeline


@dataclass
class PipelineResult:
    rows: list
    full_accuracy: float
    full_anchor_loss: float
    proxy_iterations: int
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rows": self.rows,
            "full_accuracy": self.full_accuracy,
            "full_anchor_loss": self.full_anchor_loss,
            "proxy_iterations": self.proxy_iterations,
        }


def _fit_and_evaluate(spec, subset, data, opts):
    theta = models.train(spec, subset, opts)
    return models.accuracy(spec, theta, data.test), models.loss(spec, theta, data.anchor)


def _random_rows(n, k, seed, p):
    if k >= n:
        return np.arange(n)
    rng = rng_stream(seed, f"random-subset:{p!r}")
    return np.sort(rng.choice(n, size=k, replace=False))


def _corrupted_count(pool, ids):
    if pool.corrupted is None:
        return None
    return int(pool.select_ids(ids).corrupted.sum())


def run_pipeline(cfg, out_dir, workers=1):
    """Score the pool with the proxy, select top-p subsets, train the target
    on each and compare with full-pool and size-matched random training."""
    out = _out(out_dir)
    h = cfg.hash()
    seed = cfg.experiment.seed
    timer = _Timer()
    opts = train_options(cfg)
    data = build_data(cfg)
    pool = data.pool
    proxy_spec = model_spec(cfg.proxy, pool)
    target_spec = model_spec(cfg.target, pool)

    with timer.phase("scoring"):
        theta_p, proxy_iters, _ = proxy_checkpoint(proxy_spec, pool, opts, cfg.proxy.train_fraction)
        records = scoring.score_pool(
            proxy_spec, theta_p, pool, data.anchor, cfg.scoring.mode, cfg.scoring.eta,
            order_seed=seed, workers=workers,
        )
    scoring.write_records_csv(out / "scores.csv", records, f"config_sha256={h}")

    with timer.phase("selection"):
        reports_ = [selection.rank_and_select(records, cfg.scoring.key, p) for p in cfg.scoring.p_values]
    for rep in reports_:
        reports.write_json(out / f"selection_p{_ptag(rep.p)}.json", {"config_sha256": h, **rep.to_dict()})

    def train_job(job):
        kind, p, ids_or_rows = job
        subset = pool.select_ids(ids_or_rows) if kind == "ost" else pool.take(ids_or_rows)
        return _fit_and_evaluate(target_spec, subset, data, opts)

    jobs = [("full", 1.0, np.arange(pool.n))]
    for rep in reports_:
        jobs.append(("ost", rep.p, rep.selected_ids))
        jobs.append(("random", rep.p, _random_rows(pool.n, rep.n_selected, seed, rep.p)))
    with timer.phase("target_training"):
        results = _map(train_job, jobs, workers)
    full_acc, full_loss = results[0]

    rows = []
    for n, rep in enumerate(reports_):
        (ost_acc, ost_loss), (rnd_acc, rnd_loss) = results[1 + 2 * n], results[2 + 2 * n]
        rnd_ids = pool.sample_ids[jobs[2 + 2 * n][2]]
        rows.append(
            {
                "p": rep.p,
                "n_selected": rep.n_selected,
                "n_toxic_pool": rep.n_toxic,
                "cut_score": rep.cut_score,
                "ost_accuracy": ost_acc,
                "ost_anchor_loss": ost_loss,
                "random_accuracy": rnd_acc,
                "random_anchor_loss": rnd_loss,
                "ost_corrupted": _corrupted_count(pool, rep.selected_ids),
                "random_corrupted": _corrupted_count(pool, rnd_ids),
            }
        )
    result = PipelineResult(rows, full_acc, full_loss, proxy_iters, dict(timer.phases))

    header = list(rows[0].keys()) + ["full_accuracy"]
    reports.write_table(
        out / "pipeline.csv", header, [[r[k] for k in rows[0]] + [full_acc] for r in rows], h
    )
    reports.write_json(out / "result.json", {"config_sha256": h, **result.to_dict()})
    ps = [r["p"] for r in rows]
    reports.line_plot(
        out / "accuracy.svg",
        ps,
        {
            "OST top-p": [r["ost_accuracy"] for r in rows],
            "random": [r["random_accuracy"] for r in rows],
            "full pool": [full_acc] * len(rows),
        },
        title="Target accuracy vs selection ratio",
        xlabel="p",
        ylabel="held-out accuracy",
        dashed=("full pool",),
    )
    return result


# triptych


@dataclass
class TriptychResult:
    pearson: float
    spearman: float
    top_overlap: object
    bottom_overlap: object
    loo_method: str
    files: list


def run_triptych(cfg, out_dir, workers=1):
    """IF against exact LOO on the most influential samples, then top/bottom
    overlap between the one-step ranking and the IF ranking."""
    out = _out(out_dir)
    h = cfg.hash()
    sc = cfg.scoring
    opts = train_options(cfg)
    data = build_data(cfg)
    pool, anchor = data.pool, data.anchor
    spec = model_spec(cfg.target, pool)

    theta_hat = models.train(spec, pool, opts.tightened())
    if_scores = oracles.influence_scores(spec, theta_hat, pool, anchor, sc.damping)
    records = scoring.score_pool(spec, theta_hat, pool, anchor, "inner_product", order_seed=cfg.experiment.seed)
    for rec, v in zip(records, if_scores):
        rec.if_score = float(v)

    key = np.abs(if_scores) if sc.if_key == "abs" else if_scores
    top_rows = np.lexsort((pool.sample_ids, -key))[: min(sc.top_k_loo, pool.n)]
    top_ids = pool.sample_ids[top_rows]
    if pool.n <= sc.max_exact_loo:
        loo, _ = oracles.loo_exact_many(spec, pool, anchor, opts, top_ids, workers, theta_hat)
        method = "exact retraining"
    elif spec.loss_family == models.SQUARED:
        loo = oracles.loo_ridge_all(spec, pool, anchor, top_ids)
        method = "closed-form ridge"
    else:
        raise IntractableLOO(
            f"pool of {pool.n} exceeds the exact LOO cap {sc.max_exact_loo} and the loss has no closed form"
        )
    for rec_row, v in zip(top_rows, loo):
        records[rec_row].loo = float(v)
    pearson = selection.correlation(if_scores[top_rows], loo, "pearson")
    spearman = selection.correlation(if_scores[top_rows], loo, "spearman")

    reports.write_table(
        out / "if_vs_loo.csv",
        ["id", "if_score", "loo_delta"],
        [[int(i), float(a), float(b)] for i, a, b in zip(top_ids, if_scores[top_rows], loo)],
        h,
    )
    oracle_rows = [
        oracles.OracleScore(r.sample_id, r.loo if r.loo is not None else float("nan"), r.if_score, {"damping": sc.damping})
        for r in records
    ]
    oracles.write_oracle_csv(out / "oracle.csv", oracle_rows, f"config_sha256={h}")
    scoring.write_records_csv(out / "scores.csv", records, f"config_sha256={h}")

    ids = pool.sample_ids
    s_vals = np.array([r.s for r in records])
    if sc.absolute_overlap:
        rank_ost, rank_if = selection.rank(ids, np.abs(s_vals)), selection.rank(ids, np.abs(if_scores))
    else:
        rank_ost, rank_if = selection.rank(ids, s_vals), selection.rank(ids, if_scores)
    curves = {}
    for end in ("top", "bottom"):
        curve = selection.overlap_curve(rank_ost, rank_if, sc.overlap_p, end)
        curves[end] = curve
        reports.write_table(
            out / f"{end}_overlap.csv",
            ["p", "overlap", "baseline"],
            list(zip(curve.p, curve.overlap, curve.baseline)),
            h,
        )
        reports.line_plot(
            out / f"{end}_overlap.svg",
            curve.p,
            {"OST vs IF": curve.overlap, "random": curve.baseline},
            title=f"{end.capitalize()}-p overlap",
            xlabel="p",
            ylabel="overlap",
            dashed=("random",),
        )
    reports.scatter_plot(
        out / "if_vs_loo.svg",
        if_scores[top_rows],
        loo,
        title=f"IF vs LOO (top {top_rows.size}, r = {pearson:.3f})",
        xlabel="influence score",
        ylabel="LOO delta",
    )
    reports.write_json(
        out / "summary.json",
        {
            "config_sha256": h,
            "n_pool": pool.n,
            "n_anchor": len(anchor),
            "loss_family": spec.loss_family,
            "damping": sc.damping,
            "loo_method": method,
            "top_k": int(top_rows.size),
            "if_key": sc.if_key,
            "pearson_if_loo": pearson,
            "spearman_if_loo": spearman,
            "top_overlap": dict(zip(map(_ptag, curves["top"].p), curves["top"].overlap)),
            "bottom_overlap": dict(zip(map(_ptag, curves["bottom"].p), curves["bottom"].overlap)),
        },
    )
    files = sorted(p.name for p in out.iterdir())
    return TriptychResult(pearson, spearman, curves["top"], curves["bottom"], method, files)


# proxy transfer


@dataclass
class TransferResult:
    proxy: scoring.AlignmentEstimate
    anti_proxy: scoring.AlignmentEstimate
    proxy_overlap: float
    anti_overlap: float
    curve: object


def _projection(cfg, d_in):
    k = cfg.proxy.feature_dim or max(1, d_in // 2)
    if cfg.proxy.projection == "identity":
        if k != d_in:
            raise ValueError("identity projection needs proxy.feature_dim equal to the data dimension")
        return np.eye(d_in)
    rng = rng_stream(cfg.experiment.seed, "projection")
    return rng.standard_normal((d_in, k)) / np.sqrt(k)


def run_proxy_transfer(cfg, out_dir, workers=1):
    """Score the pool with a reduced-feature proxy and with the target, each
    at its own trained checkpoint, and measure how well the rankings agree.
    A proxy trained on label-permuted data serves as negative control."""
    out = _out(out_dir)
    h = cfg.hash()
    seed = cfg.experiment.seed
    opts = train_options(cfg)
    data = build_data(cfg)
    pool, anchor = data.pool, data.anchor.data
    target_spec = model_spec(cfg.target, pool)
    theta_t = models.train(target_spec, pool, opts)
    target = scoring.score_pool(target_spec, theta_t, pool, anchor, workers=workers)

    P = _projection(cfg, pool.d)
    reports.write_table(out / "projection.csv", [f"c{j}" for j in range(P.shape[1])], P.tolist(), h)
    proxy_pool = pool.with_features(pool.features @ P)
    proxy_anchor = anchor.with_features(anchor.features @ P)
    proxy_spec = model_spec(cfg.proxy, pool, feature_dim=P.shape[1])
    permuted = proxy_pool.with_labels(rng_stream(seed, "anti-proxy").permutation(proxy_pool.labels))

    def proxy_scores(train_pool):
        theta = models.train(proxy_spec, train_pool, opts)
        return scoring.score_pool(proxy_spec, theta, train_pool, proxy_anchor, workers=workers)

    proxy, anti = proxy_scores(proxy_pool), proxy_scores(permuted)
    ids = pool.sample_ids

    def ranking(recs):
        return selection.rank(ids, [r.s for r in recs])

    r_target, r_proxy, r_anti = ranking(target), ranking(proxy), ranking(anti)
    ps = cfg.scoring.overlap_p
    curve = selection.overlap_curve(r_proxy, r_target, ps)
    anti_curve = selection.overlap_curve(r_anti, r_target, ps)
    al_proxy, al_anti = scoring.fit_alignment(proxy, target), scoring.fit_alignment(anti, target)
    ov_proxy = selection.overlap(r_proxy, r_target, 0.2)
    ov_anti = selection.overlap(r_anti, r_target, 0.2)

    reports.write_table(
        out / "overlap.csv",
        ["p", "overlap", "baseline", "anti_overlap"],
        list(zip(curve.p, curve.overlap, curve.baseline, anti_curve.overlap)),
        h,
    )
    reports.write_table(
        out / "scores.csv",
        ["id", "s_target", "s_proxy", "s_anti_proxy"],
        [[int(i), a.s, b.s, c.s] for i, a, b, c in zip(ids, target, proxy, anti)],
        h,
    )

    def summary(al, ov):
        return {
            "alpha": al.alpha,
            "epsilon_hat": al.epsilon_hat,
            "rank_corr": al.rank_corr,
            "slope": al.slope,
            "intercept": al.intercept,
            "top20_overlap": ov,
        }

    reports.write_json(
        out / "alignment.json",
        {
            "config_sha256": h,
            "target_params": target_spec.n_params,
            "proxy_params": proxy_spec.n_params,
            "proxy": summary(al_proxy, ov_proxy),
            "anti_proxy": summary(al_anti, ov_anti),
            "top20_baseline": selection.subset_size(pool.n, 0.2) / pool.n,
        },
    )
    reports.line_plot(
        out / "overlap.svg",
        curve.p,
        {"proxy vs target": curve.overlap, "anti-proxy": anti_curve.overlap, "random": curve.baseline},
        title="Proxy-to-target top-p overlap",
        xlabel="p",
        ylabel="overlap",
        dashed=("random",),
    )
    reports.scatter_plot(
        out / "proxy_vs_target.svg",
        [r.s for r in proxy],
        [r.s for r in target],
        title=f"Proxy vs target scores (Spearman {al_proxy.rank_corr:.3f})",
        xlabel="proxy s",
        ylabel="target s",
    )
    return TransferResult(al_proxy, al_anti, ov_proxy, ov_anti, curve)


# checkpoint ablation


def run_checkpoint_ablation(cfg, out_dir, workers=1):
    """Downstream accuracy when the proxy is snapshotted at several fractions
    of its iterations-to-convergence. Reporting only: no trend is enforced."""
    out = _out(out_dir)
    h = cfg.hash()
    opts = train_options(cfg)
    data = build_data(cfg)
    pool = data.pool
    proxy_spec = model_spec(cfg.proxy, pool)
    target_spec = model_spec(cfg.target, pool)
    p = cfg.scoring.ablation_p

    def one(fraction):
        theta, used, total = proxy_checkpoint(proxy_spec, pool, opts, fraction)
        recs = scoring.score_pool(
            proxy_spec, theta, pool, data.anchor, cfg.scoring.mode, cfg.scoring.eta,
            order_seed=cfg.experiment.seed,
        )
        rep = selection.rank_and_select(recs, cfg.scoring.key, p)
        acc, anchor_loss = _fit_and_evaluate(target_spec, pool.select_ids(rep.selected_ids), data, opts)
        return {
            "fraction": fraction,
            "proxy_iterations": used,
            "target_accuracy": acc,
            "anchor_loss": anchor_loss,
            "n_selected": rep.n_selected,
            "corrupted_selected": _corrupted_count(pool, rep.selected_ids),
        }

    rows = _map(one, list(cfg.scoring.fractions), workers)
    header = list(rows[0].keys())
    reports.write_table(out / "ablation.csv", header, [[r[k] for k in header] for r in rows], h)
    reports.write_json(
        out / "ablation.json",
        {
            "config_sha256": h,
            "note": "desk-scale analogue: progress is a fraction of the proxy's "
            "gradient-descent iterations to convergence on the candidate pool",
            "p": p,
            "rows": rows,
        },
    )
    reports.line_plot(
        out / "ablation.svg",
        [r["fraction"] for r in rows],
        {"target accuracy": [r["target_accuracy"] for r in rows]},
        title=f"Proxy training state vs downstream accuracy (p = {p:g})",
        xlabel="proxy progress",
        ylabel="held-out accuracy",
    )
    return rows


# noise rejection


@dataclass
class NoiseResult:
    rows: list
    mean_s_clean: float
    mean_s_flipped: float


def run_noise_rejection(cfg, out_dir, workers=1):
    """Treat the bottom ``q`` fraction by score as predicted toxic and compare
    with the ground-truth corruption flags."""
    out = _out(out_dir)
    h = cfg.hash()
    opts = train_options(cfg)
    data = build_data(cfg)
    pool = data.pool
    if pool.corrupted is None:
        raise NoFlags("the pool carries no corruption flags")
    spec = model_spec(cfg.proxy, pool)
    theta, _, _ = proxy_checkpoint(spec, pool, opts, cfg.proxy.train_fraction)
    records = scoring.score_pool(
        spec, theta, pool, data.anchor, cfg.scoring.mode, cfg.scoring.eta,
        order_seed=cfg.experiment.seed, workers=workers,
    )
    scoring.write_records_csv(out / "scores.csv", records, f"config_sha256={h}")
    key = cfg.scoring.key
    flags = dict(zip(pool.sample_ids.tolist(), pool.corrupted.tolist()))
    n_flipped = int(pool.corrupted.sum())

    rows = []
    for q in cfg.scoring.q_values:
        rep = selection.rank_and_select(records, key, q, end="bottom")
        hits = sum(flags[i] for i in rep.selected_ids)
        rows.append(
            {
                "q": q,
                "n_predicted": rep.n_selected,
                "true_positives": hits,
                "precision": hits / rep.n_selected,
                "recall": hits / n_flipped if n_flipped else None,
            }
        )
    reports.write_table(
        out / "detection.csv",
        ["q", "n_predicted", "true_positives", "precision", "recall"],
        [[r["q"], r["n_predicted"], r["true_positives"], r["precision"],
          "not-applicable" if r["recall"] is None else r["recall"]] for r in rows],
        h,
    )

    _, vals = selection.key_values(records, key)
    is_flipped = pool.corrupted
    bins = cfg.scoring.histogram_bins
    threshold = selection.rank_and_select(records, key, cfg.scoring.histogram_p).cut_score
    all_hist = selection.histogram_values(vals, bins, threshold)
    rng_ = (float(all_hist.edges[0]), float(all_hist.edges[-1]))
    clean_hist = selection.histogram_values(vals[~is_flipped], bins, threshold, rng_) if (~is_flipped).any() else None
    flip_hist = selection.histogram_values(vals[is_flipped], bins, threshold, rng_) if is_flipped.any() else None
    for name, hist in (("histogram", all_hist), ("histogram_clean", clean_hist), ("histogram_flipped", flip_hist)):
        if hist is not None:
            reports.write_table(
                out / f"{name}.csv",
                ["bin_lo", "bin_hi", "count"],
                list(zip(hist.edges[:-1], hist.edges[1:], hist.counts)),
                h,
            )
    reports.bar_plot(
        out / "histogram.svg",
        all_hist.edges,
        clean_hist.counts if clean_hist is not None else all_hist.counts,
        title=f"Utility scores {key} (clean filled, flipped outlined; line = top-{cfg.scoring.histogram_p:g} cut)",
        xlabel=f"{key} (positive = anchor loss decreases)",
        marker=threshold,
        overlay=flip_hist.counts if flip_hist is not None else None,
    )
    mean_clean = float(vals[~is_flipped].mean()) if (~is_flipped).any() else float("nan")
    mean_flip = float(vals[is_flipped].mean()) if is_flipped.any() else float("nan")
    reports.write_json(
        out / "noise.json",
        {
            "config_sha256": h,
            "n_pool": pool.n,
            "n_flipped": n_flipped,
            "mean_score_clean": mean_clean,
            "mean_score_flipped": mean_flip,
            "threshold": threshold,
            "rows": [
                {**r, "recall": "not-applicable" if r["recall"] is None else r["recall"]} for r in rows
            ],
        },
    )
    return NoiseResult(rows, mean_clean, mean_flip)


RUNNERS = {
    "pipeline": run_pipeline,
    "triptych": run_triptych,
    "proxy_transfer": run_proxy_transfer,
    "checkpoint_ablation": run_checkpoint_ablation,
    "noise_rejection": run_noise_rejection,
}
