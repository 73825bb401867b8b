"""Ranking, subset selection and agreement statistics."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .datasets import rng_stream
from .errors import IdSetMismatch, MissingKey, TooFewSamples, ZeroVariance

KEYS = {"s": "s", "delta": "delta", "if": "if_score", "loo": "loo"}
P_GRID = (0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.00)


@dataclass
class SelectionReport:
    key: str
    p: float
    ranking: list
    selected_ids: list
    cut_score: float
    n_selected: int
    n_toxic: int
    end: str = "top"

    def to_dict(self):
        return {
            "key": self.key,
            "p": self.p,
            "end": self.end,
            "n_total": len(self.ranking),
            "n_selected": self.n_selected,
            "n_toxic": self.n_toxic,
            "cut_score": self.cut_score,
            "selected_ids": self.selected_ids,
            "ranking": self.ranking,
        }


@dataclass
class OverlapCurve:
    p: np.ndarray
    overlap: np.ndarray
    baseline: np.ndarray
    end: str = "top"


@dataclass
class IndependenceStats:
    slope: float
    intercept: float
    r_squared: float
    acf: np.ndarray


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    threshold: float = None


def key_values(records, key):
    """Sample ids and the chosen score for every record; raises if any is missing."""
    if key not in KEYS:
        raise ValueError(f"unknown key {key!r}; expected one of {sorted(KEYS)}")
    attr = KEYS[key]
    ids = np.array([r.sample_id for r in records], dtype=np.int64)
    vals = [getattr(r, attr) for r in records]
    if any(v is None or not math.isfinite(v) for v in vals):
        raise MissingKey(f"{sum(v is None for v in vals)} records lack key {key!r}")
    return ids, np.array(vals, dtype=np.float64)


def rank(ids, scores):
    """Sample ids by descending score, ties broken by ascending id."""
    ids = np.asarray(ids)
    return ids[np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))]


def subset_size(n, p):
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    # ceil(p * n) with a guard against p * n landing a hair above an integer
    return min(n, max(1, math.ceil(round(p * n, 9))))


def rank_and_select(records, key="s", p=0.2, end="top"):
    """Keep the best (``end="top"``) or worst ``ceil(p * N)`` samples by ``key``.

    Samples with a negative score count as toxic.
    """
    ids, vals = key_values(records, key)
    ranking = rank(ids, vals)
    k = subset_size(ids.size, p)
    chosen = ranking[:k] if end == "top" else ranking[-k:]
    by_id = dict(zip(ids.tolist(), vals.tolist()))
    return SelectionReport(
        key=key,
        p=float(p),
        ranking=ranking.tolist(),
        selected_ids=chosen.tolist(),
        cut_score=float(by_id[int(chosen[-1] if end == "top" else chosen[0])]),
        n_selected=int(k),
        n_toxic=int(np.sum(vals < 0)),
        end=end,
    )


def overlap(rank_a, rank_b, p, end="top"):
    """Shared fraction of the heads (or tails) of two rankings of the same ids."""
    a, b = np.asarray(rank_a), np.asarray(rank_b)
    if a.size != b.size or not np.array_equal(np.sort(a), np.sort(b)):
        raise IdSetMismatch("rankings cover different id sets")
    k = subset_size(a.size, p)
    if end == "top":
        ha, hb = a[:k], b[:k]
    elif end == "bottom":
        ha, hb = a[-k:], b[-k:]
    else:
        raise ValueError(f"unknown end {end!r}")
    return np.intersect1d(ha, hb).size / k


def overlap_curve(rank_a, rank_b, ps=P_GRID, end="top"):
    ps = np.asarray(ps, dtype=np.float64)
    n = len(rank_a)
    return OverlapCurve(
        p=ps,
        overlap=np.array([overlap(rank_a, rank_b, p, end) for p in ps]),
        baseline=np.array([subset_size(n, p) / n for p in ps]),
        end=end,
    )


def random_overlap(n, p, trials=500, seed=0):
    """Mean and standard error of the overlap between independent random rankings."""
    rng = rng_stream(seed, "random-overlap")
    ids = np.arange(n)
    vals = np.array([overlap(rng.permutation(ids), rng.permutation(ids), p) for _ in range(trials)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(trials))


def correlation(a, b, method="pearson"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("inputs differ in length")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ZeroVariance("correlation is undefined for a constant input")
    if method == "pearson":
        return float(stats.pearsonr(a, b).statistic)
    if method == "spearman":
        return float(stats.spearmanr(a, b).statistic)
    raise ValueError(f"unknown method {method!r}")


def rank_correlation(records, key_a, key_b, method="spearman"):
    _, a = key_values(records, key_a)
    _, b = key_values(records, key_b)
    return correlation(a, b, method)


def acf(x, max_lag):
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    denom = float(x @ x)
    if denom == 0:
        return np.zeros(max_lag)
    return np.array([float(x[:-k] @ x[k:]) / denom for k in range(1, max_lag + 1)])


def independence_stats(records, key="s"):
    """Drift of the score over processing order: OLS slope and R^2 of score
    on ``scoring_index``, plus autocorrelations at lags ``1..min(50, N//4)``."""
    _, vals = key_values(records, key)
    idx = np.array([r.scoring_index for r in records], dtype=np.float64)
    if vals.size < 10:
        raise TooFewSamples(f"need at least 10 records, got {vals.size}")
    order = np.argsort(idx, kind="stable")
    y, t = vals[order], idx[order]
    tc = t - t.mean()
    yc = y - y.mean()
    slope = float(tc @ yc / (tc @ tc))
    ss_tot = float(yc @ yc)
    r2 = 0.0 if ss_tot == 0 else float(max(0.0, min(1.0, (slope**2) * (tc @ tc) / ss_tot)))
    return IndependenceStats(
        slope=slope,
        intercept=float(y.mean() - slope * t.mean()),
        r_squared=r2,
        acf=acf(y, min(50, vals.size // 4)),
    )


def histogram(records, key="s", bins=20, p=None):
    """Equal-width histogram over ``[min, max]``; ``threshold`` marks the
    top-``p`` cut score when ``p`` is given. All-equal scores give one bin."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    _, vals = key_values(records, key)
    return histogram_values(vals, bins, None if p is None else rank_and_select(records, key, p).cut_score)


def histogram_values(vals, bins, threshold=None, range_=None):
    vals = np.asarray(vals, dtype=np.float64)
    lo, hi = (float(vals.min()), float(vals.max())) if range_ is None else range_
    if lo == hi:
        return Histogram(np.array([lo, hi]), np.array([vals.size]), threshold)
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
    return Histogram(edges, counts, threshold)
