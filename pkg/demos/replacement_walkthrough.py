"""Walk through one replacement test on a finished run directory.

    cachesae run configs/demo.json --out runs/demo
    python demos/replacement_walkthrough.py runs/demo

Picks the first firing of the strongest atom, swaps the native write for the
atom, for nothing, and for a random rank-1 write, and prints the KL of each
at the final position alongside the geometry of the atom.
"""

import sys
from pathlib import Path

import numpy as np

from cachesae.causal import Harness, find_firings
from cachesae.config import ExperimentConfig
from cachesae.partition import matrix_cosines
from cachesae.pipeline import Run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
cfg = ExperimentConfig.from_dict(__import__("json").loads((out / "config.json").read_text()))
run = Run(cfg, out)
ds, d, model = run.dataset(), run.dictionary(), run.host()

firings = find_firings(ds, d, cap_per_feature=1)
f = max(firings, key=lambda r: r.coefficient)
base = Harness(model, run.corpus()).base(f.seq_id)
native = base.native_write(f.position, f.layer, f.head)
atom = f.coefficient * d.atom(f.feature)

print(f"cell {ds.cell}  sequence {f.seq_id}  position {f.position}  atom {f.feature}  "
      f"coefficient {f.coefficient:.3f}")
print(f"|native write| {np.linalg.norm(native):.4f}   |a * atom| {np.linalg.norm(atom):.4f}   "
      f"cosine {matrix_cosines(d.atom(f.feature), native[None])[0]:+.3f}")
h = Harness(model, run.corpus(), seed=cfg.seed)
for cond in ("native", "atom", "delete", "random"):
    print(f"  KL[{cond:6s}] = {h.score(d, f, cond):.3e}")
