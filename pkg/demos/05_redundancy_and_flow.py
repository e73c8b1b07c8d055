"""Adjacent-token similarity per layer and where influence comes from."""

import numpy as np

from ssmprune.analysis import average_flow, information_flow, redundancy
from ssmprune.model import ModelConfig, forward_pruned, init_model
from ssmprune.pruning import linear_schedule

model = init_model(ModelConfig(n_layers=4, d_model=64), seed=0)
rng = np.random.default_rng(2)
docs = [rng.integers(0, 256, size=300) for _ in range(3)]

for tap in ("block", "scan"):
    print(f"adjacent cosine ({tap}):", np.round(redundancy(model, docs, tap=tap), 3).tolist())

schedule = linear_schedule(300, 4, 0.3)
flow = average_flow([information_flow(forward_pruned(model, d, schedule, keep_materials=True)) for d in docs])
print("\nnormalized influence per position bin (rows = layers), edges", flow.edges.tolist())
for layer, row in enumerate(flow.bins):
    print(layer, " ".join(f"{v:9.2e}" for v in row), "  tokens:", flow.counts[layer].tolist())
