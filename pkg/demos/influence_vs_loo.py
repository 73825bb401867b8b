"""Compare the one-step score, influence and exact leave-one-out on ridge regression.

For squared error the LOO change has a closed form, so every sample can be
checked. Run: python3 demos/influence_vs_loo.py
"""

import numpy as np

from onestep import oracles, scoring, selection
from onestep.datasets import build_anchor, generate_mixture
from onestep.models import SQUARED, ModelSpec

data = generate_mixture(K=5, N=900, d=10, separation=2.5, noise_rate=0.2, seed=1)
anchor, pool = build_anchor(data, 100, "stratified", 1)
spec = ModelSpec(SQUARED, 5, 10, 0.05)

theta_hat = oracles.ridge_solution(spec, pool)
loo = oracles.loo_ridge_all(spec, pool, anchor)
infl = oracles.influence_scores(spec, theta_hat, pool, anchor, damping=0.0)
s_hat = np.array([r.s for r in scoring.score_pool(spec, theta_hat, pool, anchor)])
s_zero = np.array([r.s for r in scoring.score_pool(spec, spec.zeros(), pool, anchor)])

print("Pearson with exact LOO")
print(f"  influence          {selection.correlation(infl, loo):.4f}")
print(f"  s at optimum       {selection.correlation(s_hat, loo):.4f}")
print("Spearman with exact LOO")
print(f"  influence          {selection.correlation(infl, loo, 'spearman'):.4f}")
print(f"  s at zero init     {selection.correlation(s_zero, loo, 'spearman'):.4f}")

ids = pool.sample_ids
r_loo = selection.rank(ids, loo)
for name, v in (("influence", infl), ("s at zero", s_zero)):
    r = selection.rank(ids, v)
    print(f"top-10% overlap, {name:<10} {selection.overlap(r_loo, r, 0.1):.3f}"
          f"   bottom-10% {selection.overlap(r_loo, r, 0.1, end='bottom'):.3f}")
