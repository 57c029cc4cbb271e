"""Where the logit-change form is exact, and where it stops being exact.

On a one-layer host without MLPs and with the write gate shut, a rank-1
perturbation of the cache only decays, so the predicted logit change equals
the measured one.  Opening the gate rotates the left factor; the fitted G
absorbs that, the analytic gate product does not.

    python demos/linear_host_exactness.py
"""

import numpy as np

from cachesae.hosts import forward, linear_readout_host
from cachesae.predictor import fit_feature_sequence

rng = np.random.default_rng(0)
toks = rng.integers(0, 16, size=20)
key, value = rng.normal(size=8), rng.normal(size=8)

for label, bias in (("closed gate", -np.inf), ("open gate", 0.0)):
    host = linear_readout_host(write_gate_bias=bias)
    tr = forward(host, toks)
    fit = fit_feature_sequence(host, toks, (0, 0), 4, key, value, eps=0.3)
    print(f"{label:11s}  mean beta {tr.beta.mean():.2f}  fitted G {fit.G:+.4e}  "
          f"gate product G {fit.G_alpha:+.4e}  R2 {fit.r2:.6f}  R2 (gate product) {fit.r2_analytic:.4f}")
