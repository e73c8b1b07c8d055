"""Measurement instruments: token redundancy, information flow, FLOPs, latency."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import ForwardRecord, Model, ModelConfig, forward, forward_pruned
from .pruning import influence_scores, linear_schedule

N_FLOW_BINS = 5


def _adjacent(tokens: np.ndarray) -> float:
    if tokens.shape[0] < 2:
        raise ValueError("adjacent cosine needs at least two tokens")
    a = tokens[:-1].astype(np.float64)
    b = tokens[1:].astype(np.float64)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine undefined for zero vectors")
    cos = np.sum(a * b, axis=1) / norms
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def adjacent_cosine(documents: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Mean cosine similarity of adjacent tokens per layer, averaged over documents.

    ``documents[i][l]`` holds the ``[k, d]`` token states of layer ``l`` for
    document ``i``.
    """
    if not documents:
        raise ValueError("no documents")
    n_layers = len(documents[0])
    if any(len(doc) != n_layers for doc in documents):
        raise ValueError("documents disagree on the number of layers")
    per_doc = np.array([[_adjacent(layer) for layer in doc] for doc in documents])
    return per_doc.mean(axis=0)


def layer_states(model: Model, token_ids: Sequence[int], tap: str = "block") -> list[np.ndarray]:
    """Dense per-layer token states at the chosen tap.

    ``tap="block"`` is the residual stream after each block, ``tap="scan"``
    the raw scan output inside it.
    """
    if tap == "block":
        return forward(model, token_ids, keep_outputs=True).outputs
    if tap == "scan":
        return [m.y for m in forward(model, token_ids, keep_materials=True).materials]
    raise ValueError(f"unknown tap {tap!r}")


def redundancy(model: Model, documents: Iterable[Sequence[int]], tap: str = "block") -> np.ndarray:
    return adjacent_cosine([layer_states(model, doc, tap) for doc in documents])


# ---------------------------------------------------------------------------
# information flow


@dataclass
class FlowProfile:
    bins: np.ndarray  # [n_layers, n_bins], mean normalized influence
    edges: np.ndarray  # [n_bins + 1], bin boundaries in original positions
    counts: np.ndarray  # [n_layers, n_bins], positions that fed each mean


def position_bins(positions: np.ndarray, length: int, n_bins: int = N_FLOW_BINS) -> np.ndarray:
    """Equal-width bin index of each position in ``[0, length)``."""
    return (np.asarray(positions, dtype=np.int64) * n_bins) // length


def bin_means(positions: np.ndarray, values: np.ndarray, length: int,
              n_bins: int = N_FLOW_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``values`` per equal-width position bin (0 where a bin is empty) and bin counts."""
    idx = position_bins(positions, length, n_bins)
    if len(idx) and (idx.min() < 0 or idx.max() >= n_bins):
        raise ValueError(f"positions must lie in [0, {length})")
    sums = np.bincount(idx, weights=values, minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    return np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0), counts


def normalized_influence(record: ForwardRecord, layer: int, aggregator: str = "max") -> tuple[np.ndarray, np.ndarray]:
    """``(positions, s(t) / ||y_target||)`` for the tokens entering ``layer``."""
    if not record.materials:
        raise ValueError("record was produced without keep_materials=True")
    mat = record.materials[layer]
    scores = influence_scores(mat.params, target=mat.target, aggregator=aggregator,
                              decay_delta=mat.decay_delta).scores
    norm = float(np.linalg.norm(mat.y[mat.target].astype(np.float64)))
    if norm == 0.0:
        raise ValueError(f"layer {layer}: target output is zero, influence cannot be normalized")
    return mat.positions[: mat.target + 1], scores.astype(np.float64) / norm


def information_flow(record: ForwardRecord, n_bins: int = N_FLOW_BINS, aggregator: str = "max",
                     length: int | None = None) -> FlowProfile:
    """Bin normalized influence by original position, per layer.

    A position contributes only at layers it entered. Empty bins (every
    token there already pruned) report zero influence.
    """
    if not record.materials:
        raise ValueError("record was produced without keep_materials=True")
    length = record.length if length is None else length
    n_layers = len(record.materials)
    bins = np.zeros((n_layers, n_bins))
    counts = np.zeros((n_layers, n_bins), dtype=np.int64)
    for layer in range(n_layers):
        pos, value = normalized_influence(record, layer, aggregator)
        bins[layer], counts[layer] = bin_means(pos, value, length, n_bins)
    edges = np.array([(i * length + n_bins - 1) // n_bins for i in range(n_bins + 1)])
    return FlowProfile(bins, edges, counts)


def average_flow(profiles: Sequence[FlowProfile]) -> FlowProfile:
    """Average of per-document bin means (each document weighs the same)."""
    if not profiles:
        raise ValueError("no profiles")
    bins = np.mean([p.bins for p in profiles], axis=0)
    counts = np.sum([p.counts for p in profiles], axis=0)
    return FlowProfile(bins, profiles[0].edges, counts)


# ---------------------------------------------------------------------------
# FLOPs

FLOP_COMPONENTS = ("projections", "conv", "dbc", "scan")


@dataclass
class FlopsReport:
    per_layer: list[int]
    head: int
    breakdown: dict[str, int]  # component -> count summed over layers; includes "head"
    entering: list[int]  # tokens entering each layer

    @property
    def total(self) -> int:
        return sum(self.per_layer) + self.head


def layer_flops(config: ModelConfig, k: int) -> dict[str, int]:
    """Per-component counts for one block over ``k`` tokens (MAC = 2 ops)."""
    dm, di, n, r = config.d_model, config.d_inner, config.d_state, config.dt_rank
    return {
        "projections": 2 * k * dm * 2 * di + 2 * k * di * dm,
        "conv": 2 * k * di * config.d_conv,
        "dbc": 2 * k * (di * n * 2 + di * r + r * di),
        "scan": 6 * k * di * n,
    }


def flops_estimate(config: ModelConfig, keep: Sequence[int] | None, length: int, tail: int = 0) -> FlopsReport:
    """FLOPs of one forward pass.

    ``keep[l]`` is the number of prunable tokens surviving layer ``l`` (None
    for dense). ``tail`` counts unprunable tokens (labels) present in every
    layer. Norms and activations are not counted.
    """
    if keep is None:
        keep = [length] * config.n_layers
    keep = [int(k) for k in keep]
    if len(keep) != config.n_layers:
        raise ValueError(f"{len(keep)} keep counts for {config.n_layers} layers")
    if any(k < 0 for k in keep) or length < 0 or tail < 0:
        raise ValueError("token counts must be non-negative")
    entering = [length + tail] + [k + tail for k in keep[:-1]]
    breakdown = dict.fromkeys(FLOP_COMPONENTS, 0)
    per_layer = []
    for k in entering:
        parts = layer_flops(config, k)
        per_layer.append(sum(parts.values()))
        for name, value in parts.items():
            breakdown[name] += value
    head = 2 * (keep[-1] + tail) * config.d_model * config.vocab_size
    breakdown["head"] = head
    return FlopsReport(per_layer, head, breakdown, entering)


# ---------------------------------------------------------------------------
# wall clock


@dataclass
class BenchRow:
    length: int
    dense_mean: float
    pruned_mean: float
    dense_std: float
    pruned_std: float

    @property
    def speedup(self) -> float:
        return self.dense_mean / self.pruned_mean


def _timed(fn, repetitions: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return np.array(times)


def wall_clock_bench(model: Model, lengths: Sequence[int], ratio: float, repetitions: int = 3,
                     warmup: int = 1, criterion: str = "influence", seed: int = 0,
                     **prune_kwargs) -> list[BenchRow]:
    """Mean prefill latency of the dense and pruned forward per input length.

    Warmup runs are excluded. Dense and pruned runs alternate per length so
    slow drift in machine load hits both equally. Do not run concurrently
    with other benchmarks.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    n_layers = model.config.n_layers
    for length in lengths:
        ids = rng.integers(0, model.config.vocab_size, size=length)
        schedule = linear_schedule(length, n_layers, ratio)
        dense = _timed(lambda: forward(model, ids), repetitions, warmup)
        pruned = _timed(lambda: forward_pruned(model, ids, schedule, criterion, seed=seed, **prune_kwargs), repetitions, warmup)
        rows.append(BenchRow(length, float(dense.mean()), float(pruned.mean()), float(dense.std()), float(pruned.std())))
    return rows


# ---------------------------------------------------------------------------
# CSV

METRIC_COLUMNS = ("layer", "metric", "value")
BENCH_COLUMNS = ("length", "criterion", "keep_ratio", "dense_mean_s", "pruned_mean_s", "dense_std_s",
                 "pruned_std_s", "speedup")


def format_value(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def table_csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    """CSV text with a header line; numbers written with full precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row {row!r} does not match columns {columns}")
        writer.writerow([v if isinstance(v, str) else format_value(v) for v in row])
    return buf.getvalue()


def metric_rows_csv(rows: Iterable[tuple[int | str, str, float]]) -> str:
    """CSV text with columns ``layer,metric,value``."""
    return table_csv(METRIC_COLUMNS, rows)


def bench_rows(rows: Sequence[BenchRow], ratio: float, criterion: str) -> list[tuple]:
    return [(r.length, criterion, float(ratio), r.dense_mean, r.pruned_mean, r.dense_std, r.pruned_std, r.speedup)
            for r in rows]


def redundancy_rows(cosines: np.ndarray) -> list[tuple[int, str, float]]:
    return [(layer, "adjacent_cosine", float(v)) for layer, v in enumerate(cosines)]


def flow_rows(profile: FlowProfile) -> list[tuple[int, str, float]]:
    return [
        (layer, f"flow_bin_{b}", float(profile.bins[layer, b]))
        for layer in range(profile.bins.shape[0])
        for b in range(profile.bins.shape[1])
    ]


def flops_rows(config: ModelConfig, report: FlopsReport) -> list[tuple[int | str, str, int]]:
    rows: list[tuple[int | str, str, int]] = []
    for layer, k in enumerate(report.entering):
        for name, value in layer_flops(config, k).items():
            rows.append((layer, name, value))
        rows.append((layer, "tokens", k))
    rows.append(("head", "head", report.head))
    rows.append(("all", "total", report.total))
    return rows
