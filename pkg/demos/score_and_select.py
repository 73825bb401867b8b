"""Score a noisy pool against a small clean anchor, keep the top half, retrain.

Run: python3 demos/score_and_select.py
"""

import numpy as np

from onestep import models, scoring, selection
from onestep.datasets import build_anchor, corrupt_labels, generate_mixture, split
from onestep.models import LOGISTIC, ModelSpec, TrainOptions

SEED = 0

clean = generate_mixture(K=3, N=4500, d=20, separation=3.0, noise_rate=0.0, seed=SEED)
test, anchor_src, pool = split(clean, [2000, 500], SEED)
anchor, _ = build_anchor(anchor_src, 100, "stratified", SEED)

# flip 30% of pool labels; `corrupted` remembers which
pool = corrupt_labels(pool, 0.3, SEED)

spec = ModelSpec(LOGISTIC, 3, 20, 0.01)
opts = TrainOptions(1e-6)

# cold start: scores at theta = 0 only need one anchor gradient
records = scoring.score_pool(spec, spec.zeros(), pool, anchor)
s = np.array([r.s for r in records])
print(f"pool {pool.n} samples, {pool.corrupted.sum()} flipped")
print(f"mean s  clean {s[~pool.corrupted].mean():+.3f}  flipped {s[pool.corrupted].mean():+.3f}")

full = models.train(spec, pool, opts)
print(f"full pool          test acc {models.accuracy(spec, full, test):.4f}")

for p in (0.2, 0.5):
    rep = selection.rank_and_select(records, "s", p)
    keep = pool.select_ids(rep.selected_ids)
    theta = models.train(spec, keep, opts)
    print(f"top {p:.0%} by s      test acc {models.accuracy(spec, theta, test):.4f}"
          f"  (flipped kept: {keep.corrupted.sum()})")

bottom = selection.rank_and_select(records, "s", 0.3, end="bottom")
caught = np.isin(pool.sample_ids[pool.corrupted], bottom.selected_ids).mean()
print(f"bottom 30% contains {caught:.0%} of the flipped labels")
