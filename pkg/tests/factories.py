"""Random instances shared by the test modules."""

from __future__ import annotations

import numpy as np

from ssmprune import ModelConfig, ScanParams, init_model


def random_params(rng: np.random.Generator, T: int, d: int, n: int, dtype=np.float64) -> ScanParams:
    """Scan inputs with step sizes in a realistic range."""
    return ScanParams(
        a_log=rng.normal(0.0, 0.5, size=(d, n)),
        delta=np.exp(rng.uniform(np.log(1e-3), np.log(0.5), size=(T, d))),
        b=rng.normal(size=(T, n)),
        c=rng.normal(size=(T, n)),
        x=rng.normal(size=(T, d)),
    ).astype(dtype)


def tiny_config(n_layers: int = 2, d_conv: int = 3, vocab_size: int = 32) -> ModelConfig:
    return ModelConfig(n_layers=n_layers, d_model=8, expand=2, d_state=4, d_conv=d_conv, vocab_size=vocab_size)


def tiny_model(seed: int = 0, dtype=np.float32, **kwargs):
    return init_model(tiny_config(**kwargs), seed=seed, dtype=dtype)
