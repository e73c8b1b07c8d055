import csv
import io
import math
from fractions import Fraction

import numpy as np
import pytest

from factories import tiny_config, tiny_model
from oracles import contribution, scan_loop
from ssmprune.analysis import (
    BENCH_COLUMNS,
    BenchRow,
    N_FLOW_BINS,
    adjacent_cosine,
    average_flow,
    bench_rows,
    bin_means,
    flops_estimate,
    flops_rows,
    flow_rows,
    information_flow,
    layer_flops,
    layer_states,
    metric_rows_csv,
    normalized_influence,
    redundancy,
    redundancy_rows,
    table_csv,
    wall_clock_bench,
)
from ssmprune.model import ModelConfig, forward, forward_pruned, init_model
from ssmprune.pruning import PruneSchedule, linear_schedule


# --- redundancy -----------------------------------------------------------------


def test_identical_tokens_cosine_one():
    layer = np.tile(np.array([[0.3, -1.2, 2.0]]), (4, 1))
    assert adjacent_cosine([[layer]])[0] == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_pair_cosine_zero():
    assert adjacent_cosine([[np.array([[1.0, 0.0], [0.0, 2.0]])]])[0] == 0.0


def test_three_tokens_match_dot_product_oracle():
    rng = np.random.default_rng(0)
    toks = rng.normal(size=(3, 5))
    rows = toks.tolist()

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / math.sqrt(sum(x * x for x in a)) / math.sqrt(sum(y * y for y in b))

    expected = (cos(rows[0], rows[1]) + cos(rows[1], rows[2])) / 2
    assert abs(adjacent_cosine([[toks]])[0] - expected) <= 1e-6


def test_cosine_averages_over_documents():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert adjacent_cosine([[a, b], [b, b]]).tolist() == [0.5, 0.0]


def test_cosine_errors():
    with pytest.raises(ValueError):
        adjacent_cosine([[np.ones((1, 3))]])
    with pytest.raises(ValueError):
        adjacent_cosine([[np.zeros((2, 3))]])
    with pytest.raises(ValueError):
        adjacent_cosine([])
    with pytest.raises(ValueError):
        adjacent_cosine([[np.ones((2, 2))], [np.ones((2, 2)), np.ones((2, 2))]])


def test_two_token_input_gives_one_value_per_layer():
    model = tiny_model(seed=1, n_layers=3)
    for tap in ("block", "scan"):
        values = redundancy(model, [[3, 7]], tap=tap)
        assert values.shape == (3,)
        assert np.all((values >= -1) & (values <= 1))


def test_taps_read_different_states():
    model = tiny_model(seed=2, dtype=np.float64)
    ids = np.arange(9)
    block = layer_states(model, ids, "block")
    scan = layer_states(model, ids, "scan")
    assert block[0].shape == (9, 8) and scan[0].shape == (9, 16)
    assert np.array_equal(block[-1], forward(model, ids, keep_outputs=True).outputs[-1])
    with pytest.raises(ValueError):
        layer_states(model, ids, "attn")


# --- information flow -----------------------------------------------------------


def brute_force_flow(record, length, n_bins=N_FLOW_BINS):
    """Per-layer bin means from direct evaluation of every contribution."""
    out = []
    for mat in record.materials:
        p = mat.params
        args = [a.tolist() for a in (p.a_log, p.delta, p.b, p.c, p.x)]
        T = mat.target
        y_t = scan_loop(*args)[T]
        norm = math.sqrt(sum(v * v for v in y_t))
        sums, counts = [0.0] * n_bins, [0] * n_bins
        for i in range(T + 1):
            score = max(contribution(*args, i, T)) / norm
            b = int(mat.positions[i]) * n_bins // length
            sums[b] += score
            counts[b] += 1
        out.append([s / c if c else 0.0 for s, c in zip(sums, counts)])
    return np.array(out)


def test_five_tokens_one_per_bin():
    model = tiny_model(seed=3, dtype=np.float64)
    rec = forward(model, np.arange(5), keep_materials=True)
    prof = information_flow(rec)
    assert prof.bins.shape == (2, 5)
    assert np.all(prof.counts == 1)
    for layer in range(2):
        _, values = normalized_influence(rec, layer)
        assert np.array_equal(prof.bins[layer], values)


def test_uniform_values_give_equal_bins():
    means, counts = bin_means(np.arange(23), np.full(23, 0.25), 23)
    assert np.all(means == 0.25)
    assert counts.sum() == 23 and len(means) == 5


def test_bin_means_rejects_out_of_range():
    with pytest.raises(ValueError):
        bin_means(np.array([0, 10]), np.ones(2), 10)


@pytest.mark.parametrize("seed", range(2))
def test_dense_flow_matches_brute_force(seed):
    model = tiny_model(seed=20 + seed, dtype=np.float64)
    ids = np.random.default_rng(seed).integers(0, 32, size=17)
    rec = forward_pruned(model, ids, PruneSchedule.dense(17, 2), exclude_bias=False, keep_materials=True)
    prof = information_flow(rec)
    assert np.max(np.abs(prof.bins - brute_force_flow(rec, 17))) <= 1e-9 * np.max(np.abs(prof.bins))


def test_pruned_flow_counts_only_active_positions():
    model = tiny_model(seed=4, dtype=np.float64, n_layers=3)
    ids = np.random.default_rng(5).integers(0, 32, size=20)
    rec = forward_pruned(model, ids, linear_schedule(20, 3, 0.2), exclude_bias=False, keep_materials=True)
    prof = information_flow(rec)
    assert prof.counts[0].sum() == 20
    assert [c.sum() for c in prof.counts[1:]] == [len(a) for a in rec.active[:-1]]
    assert np.max(np.abs(prof.bins - brute_force_flow(rec, 20))) <= 1e-9 * np.max(np.abs(prof.bins))
    assert np.all(np.isfinite(prof.bins))
    assert prof.edges.tolist() == [0, 4, 8, 12, 16, 20]


def test_zero_target_output_is_rejected():
    model = tiny_model(seed=5, dtype=np.float64)
    layer = model.layers[0]
    n = model.config.d_state
    layer.x_proj[:, -n:] = 0.0  # C == 0, so every scan output vanishes
    rec = forward(model, np.arange(6), keep_materials=True)
    with pytest.raises(ValueError, match="zero"):
        information_flow(rec)


def test_flow_requires_materials():
    rec = forward(tiny_model(), np.arange(6))
    with pytest.raises(ValueError):
        information_flow(rec)


def test_average_flow_weighs_documents_equally():
    model = tiny_model(seed=6, dtype=np.float64)
    profs = [information_flow(forward(model, np.arange(s, s + 10), keep_materials=True)) for s in (0, 5)]
    avg = average_flow(profs)
    assert np.array_equal(avg.bins, (profs[0].bins + profs[1].bins) / 2)
    assert np.array_equal(avg.counts, profs[0].counts + profs[1].counts)


# --- FLOPs ------------------------------------------------------------------------


def test_layer_flops_hand_example():
    cfg = ModelConfig(n_layers=1, d_model=4, expand=2, d_state=2, d_conv=3, vocab_size=10, dt_rank=1)
    # d_inner = 8, k = 5 tokens
    assert layer_flops(cfg, 5) == {"projections": 960, "conv": 240, "dbc": 480, "scan": 480}
    rep = flops_estimate(cfg, [2], 5)
    assert rep.head == 2 * 2 * 4 * 10
    assert rep.total == 960 + 240 + 480 + 480 + 160


def test_full_keep_equals_dense():
    cfg = tiny_config(n_layers=3)
    assert flops_estimate(cfg, [50, 50, 50], 50) == flops_estimate(cfg, None, 50)


def test_any_reduction_is_strictly_smaller():
    cfg = tiny_config(n_layers=3)
    dense = flops_estimate(cfg, None, 50).total
    for layer in range(3):
        keep = [50, 50, 50]
        keep[layer] = 49
        assert flops_estimate(cfg, keep, 50).total < dense


def test_report_invariants_and_integers():
    cfg = tiny_config(n_layers=4)
    rep = flops_estimate(cfg, linear_schedule(100, 4, 0.3).keep, 100, tail=3)
    assert rep.total == sum(rep.per_layer) + rep.head
    assert sum(rep.breakdown.values()) == rep.total
    assert all(isinstance(v, int) and v >= 0 for v in [*rep.per_layer, rep.head, *rep.breakdown.values()])
    assert rep.entering == [103] + [k + 3 for k in linear_schedule(100, 4, 0.3).keep[:-1]]


@pytest.mark.parametrize("r", [0.1, 0.5, 0.7])
def test_trapezoid_ratio(r):
    cfg = ModelConfig(n_layers=64)
    pruned = flops_estimate(cfg, linear_schedule(4096, 64, r).keep, 4096)
    dense = flops_estimate(cfg, None, 4096)
    ratio = Fraction(sum(pruned.per_layer), sum(dense.per_layer))
    assert abs(float(ratio) / ((1 + r) / 2) - 1) <= 0.05


def test_flops_errors():
    cfg = tiny_config(n_layers=2)
    with pytest.raises(ValueError):
        flops_estimate(cfg, [5], 10)
    with pytest.raises(ValueError):
        flops_estimate(cfg, [5, -1], 10)


# --- wall clock -------------------------------------------------------------------


def test_bench_no_prune_speedup_near_one():
    model = init_model(ModelConfig(n_layers=2, d_model=32, vocab_size=64), seed=0)
    (row,) = wall_clock_bench(model, [512], 1.0, repetitions=7, warmup=1)
    assert 0.5 <= row.speedup <= 2.0
    assert row.dense_std >= 0 and row.pruned_std >= 0


def test_bench_ordering_stable_across_repetitions():
    model = init_model(ModelConfig(n_layers=4, d_model=64, vocab_size=64), seed=0)
    one = wall_clock_bench(model, [1024], 0.1, repetitions=1, warmup=1)[0]
    ten = wall_clock_bench(model, [1024], 0.1, repetitions=10, warmup=1)[0]
    assert (one.pruned_mean < one.dense_mean) == (ten.pruned_mean < ten.dense_mean)
    assert ten.pruned_mean < ten.dense_mean


def test_bench_rejects_zero_repetitions():
    with pytest.raises(ValueError):
        wall_clock_bench(tiny_model(), [8], 0.5, repetitions=0)


# --- CSV ----------------------------------------------------------------------------


def test_metric_csv_format():
    text = metric_rows_csv(redundancy_rows(np.array([0.5, 0.25])))
    assert text == "layer,metric,value\n0,adjacent_cosine,0.5\n1,adjacent_cosine,0.25\n"


def test_float_values_round_trip():
    v = 1 / 3
    row = next(csv.reader(io.StringIO(table_csv(("x",), [(v,)]).splitlines()[1])))
    assert float(row[0]) == v


def test_table_rejects_ragged_rows():
    with pytest.raises(ValueError):
        table_csv(("a", "b"), [(1,)])


def test_flow_and_flops_rows():
    model = tiny_model(seed=7, dtype=np.float64)
    prof = information_flow(forward(model, np.arange(10), keep_materials=True))
    rows = flow_rows(prof)
    assert len(rows) == 2 * 5
    assert rows[6] == (1, "flow_bin_1", prof.bins[1, 1])
    cfg = tiny_config()
    rep = flops_estimate(cfg, [6, 3], 10)
    frows = flops_rows(cfg, rep)
    assert frows[-1] == ("all", "total", rep.total)
    assert frows[-2] == ("head", "head", rep.head)
    assert [r[2] for r in frows if r[1] == "tokens"] == [10, 6]


def test_bench_rows_column_order():
    rows = bench_rows([BenchRow(64, 2.0, 1.0, 0.1, 0.2)], 0.1, "influence")
    assert rows == [(64, "influence", 0.1, 2.0, 1.0, 0.1, 0.2, 2.0)]
    assert len(BENCH_COLUMNS) == len(rows[0])
