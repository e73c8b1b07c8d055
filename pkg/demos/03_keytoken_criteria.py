"""Which tokens should go? A task where a few tokens carry all the signal.

A hand-built model stores three key tokens in its scan state and ignores
filler. Dropping half the tokens hurts little when the keys are spotted
by influence, and a lot when tokens are dropped at random.
"""

import numpy as np

from ssmprune.harness import build_keytoken_model, gen_keytoken_task, keytoken_deviation
from ssmprune.pruning import PruneSchedule

model = build_keytoken_model(3)
schedule = PruneSchedule((32, 32), 0.5, 64)

task = gen_keytoken_task(0, 64, 3, span=2)
print("tokens:", task.tokens.tolist())
print("keys at", task.key_positions.tolist(), "carrying values", task.answer.tolist())

devs = {c: [] for c in ("influence", "uniform", "random")}
for seed in range(30):
    task = gen_keytoken_task(seed, 64, 3, span=2)
    for c in devs:
        devs[c].append(keytoken_deviation(model, task, schedule, c, seed=seed))

for c, v in devs.items():
    print(f"{c:9s} median deviation of the final token: {np.median(v):.5f}")
