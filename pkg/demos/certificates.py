"""Check the local guarantees behind the one-step score on a logistic model.

1. The second-order remainder |delta - eta*s| stays under beta*eta^2*|g|^2/2.
2. Pairs whose s-gap exceeds gamma keep their order under exact deltas
   once eta is small enough.

Run: python3 demos/certificates.py
"""

import numpy as np

from onestep import models, scoring
from onestep.datasets import build_anchor, generate_mixture
from onestep.models import LOGISTIC, ModelSpec, TrainOptions

data = generate_mixture(K=4, N=400, d=8, separation=2.0, noise_rate=0.2, seed=3)
anchor, pool = build_anchor(data, 80, "stratified", 3)
spec = ModelSpec(LOGISTIC, 4, 8, 0.01)
theta = models.train(spec, pool, TrainOptions(1e-3))

for eta in (1e-3, 1e-1, 10.0):
    certs = [scoring.remainder_certificate(spec, theta, pool.take([i]), anchor, eta) for i in range(50)]
    worst = max(abs(c.details["remainder"]) / c.details["bound"] for c in certs)
    print(f"eta={eta:<6g} remainder holds {sum(c.holds for c in certs)}/50, worst remainder/bound {worst:.3f}")

recs = scoring.score_pool(spec, theta, pool, anchor)
s = np.array([r.s for r in recs])
g2 = np.array([r.grad_norm for r in recs]) ** 2
beta = models.curvature_bound(spec, anchor)
gamma = float(np.percentile(np.abs(s[:, None] - s[None, :]), 50))
i, j = np.triu_indices(s.size, 1)
eta = float(np.min(2 * gamma / (beta * (g2[i] + g2[j]))))
recs = scoring.score_pool(spec, theta, pool, anchor, mode="both", eta=eta)
cert = scoring.consistency_check(recs, gamma, beta)
print(f"gamma={gamma:.3g}, eta={eta:.2e}: {cert.details['pairs_checked']} pairs checked,"
      f" {cert.details['inversions']} inversions")
