"""One-step-train data selection for convex models.

Each candidate sample is scored by how much a single gradient step on it
would lower the loss on a small anchor set. The package also provides exact
leave-one-out and influence-function oracles to cross-check those scores,
numeric certificates for the first-order approximation, and experiment
drivers that write CSV/JSON/SVG reports.
"""

from .config import ExperimentConfig, load_config, parse_config
from .datasets import (
    AnchorSet,
    LabeledDataset,
    build_anchor,
    corrupt_labels,
    generate_mixture,
    load_idx,
    rng_stream,
    split,
    write_idx,
)
from .models import LOGISTIC, SQUARED, ModelSpec, TrainOptions, accuracy, grad, hessian, hvp, loss, train
from .oracles import influence, influence_scores, loo_exact, loo_ridge_all, loo_ridge_closed_form
from .scoring import (
    consistency_check,
    consistency_eta_bound,
    fit_alignment,
    ost_exact,
    ost_score,
    remainder_certificate,
    score_pool,
    stability_certificate,
)
from .selection import independence_stats, overlap, rank_and_select

__version__ = "0.1.0"
