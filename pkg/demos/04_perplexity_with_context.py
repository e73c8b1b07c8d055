"""Score a fixed snippet after more and more context, with context pruned.

Uses a random untrained model, so the absolute perplexities mean nothing;
the point is the protocol: the same snippet is scored for every length.
"""

import numpy as np

from ssmprune.harness import EvalSpec, perplexity_with_context, uniform_logit_model
from ssmprune.model import ModelConfig, init_model

rng = np.random.default_rng(0)
docs = [rng.integers(0, 256, size=700) for _ in range(4)]
cfg = ModelConfig(n_layers=4, d_model=64, vocab_size=256)

for name, model in (("random model", init_model(cfg, seed=0)), ("uniform logits", uniform_logit_model(cfg))):
    for ratio in (1.0, 0.3):
        spec = EvalSpec(snippet_len=100, context_lengths=(64, 256, 512), ratio=ratio)
        res = perplexity_with_context(model, docs, spec)
        cells = ", ".join(f"c={c}: {p:.3f}" for c, _, p in res.rows)
        print(f"{name:15s} r={ratio}: {cells}")
    print("  snippet hashes identical across c:", len(set(res.snippet_digest.values())) == 1)
