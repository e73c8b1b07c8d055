"""Selective state-space inference with hierarchical token pruning."""

from .kernel import ScanParams, ScanTrace, discretize, leave_one_out, scan, selective_scan
from .model import ForwardRecord, Model, ModelConfig, block_forward, forward, forward_pruned, init_model
from .pruning import (
    InfluenceScores,
    PruneSchedule,
    chunked_scores,
    influence_scores,
    linear_schedule,
    select_influence,
    select_random,
    select_uniform,
)

__version__ = "0.1.0"
