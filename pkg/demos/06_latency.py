"""Wall-clock prefill time with and without pruning.

Takes a minute or so; run it on an otherwise idle machine.
"""

from ssmprune.analysis import wall_clock_bench
from ssmprune.model import ModelConfig, init_model

model = init_model(ModelConfig(n_layers=12, d_model=256), seed=0)
for ratio in (1.0, 0.5, 0.1):
    for row in wall_clock_bench(model, [1024, 2048], ratio, repetitions=2):
        print(f"r={ratio:<4} T={row.length:5d} dense {row.dense_mean:6.3f}s  pruned {row.pruned_mean:6.3f}s"
              f"  speedup {row.speedup:.2f}x")
