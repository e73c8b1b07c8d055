"""Run a small random model densely and with tokens dropped layer by layer."""

import numpy as np

from ssmprune.analysis import flops_estimate
from ssmprune.model import ModelConfig, forward, forward_pruned, init_model
from ssmprune.pruning import linear_schedule

cfg = ModelConfig(n_layers=6, d_model=64, vocab_size=258)
model = init_model(cfg, seed=0)
ids = np.random.default_rng(1).integers(0, 256, size=200)

schedule = linear_schedule(len(ids), cfg.n_layers, 0.2)
print("tokens kept after each layer:", schedule.keep)

dense = forward(model, ids)
for criterion in ("influence", "uniform", "random"):
    rec = forward_pruned(model, ids, schedule, criterion, seed=3)
    drift = np.linalg.norm(rec.hidden[-1] - dense.hidden[-1]) / np.linalg.norm(dense.hidden[-1])
    print(f"{criterion:9s} survivors {rec.active[-1][:8].tolist()}...  last-token drift {drift:.3f}")

pruned = flops_estimate(cfg, schedule.keep, len(ids))
full = flops_estimate(cfg, None, len(ids))
print(f"FLOPs: {pruned.total:,} pruned vs {full.total:,} dense ({pruned.total / full.total:.1%})")
print("r = 1.0 is the dense model bit for bit:",
      np.array_equal(forward_pruned(model, ids, linear_schedule(200, 6, 1.0)).logits, dense.logits))
