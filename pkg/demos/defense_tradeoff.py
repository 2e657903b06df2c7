"""Privacy/utility sweep of d_chi feature noise.

Each client perturbs its node features before training; smaller eta means
more noise. Both attacks and the global test accuracy are re-measured per
budget and averaged over the configured seeds. Run from the package root:

    python3 demos/defense_tradeoff.py [configs/defense.json]
"""

import sys

import numpy as np

from ccmia.defense import tradeoff_sweep
from ccmia.pipeline import ExperimentConfig

cfg = ExperimentConfig.load(sys.argv[1] if len(sys.argv) > 1 else "configs/defense.json")
rows = tradeoff_sweep(cfg.defense_etas, cfg, cfg.defense_seeds)

print(f"{'eta':>6} {'test_acc':>9} {'mi_auc':>7} {'own_acc':>8}")
for eta in cfg.defense_etas:
    sel = [r for r in rows if r["eta"] == float(eta)]
    acc, mi, own = (np.mean([r[c] for r in sel]) for c in ("test_acc", "mi_auc", "own_acc"))
    print(f"{eta:>6} {acc:>9.3f} {mi:>7.3f} {own:>8.3f}")
