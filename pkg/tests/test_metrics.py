import csv
import json

import numpy as np
import pytest

from kcprune import metrics
from kcprune.errors import UsageError
from kcprune.nncore import ModelGraph, init_state, resnet_cifar, tinycnn
from kcprune.nncore import graph as G
from kcprune.nncore.model import pname

ANCHORS = {20: 4.06e7, 32: 6.89e7, 56: 1.25e8, 110: 2.53e8}


def one_conv_graph():
    return ModelGraph("c", (16, 32, 32), 2, [
        G.conv2d(16, 16, 3, padding=1, bias=False), G.global_avg_pool(), G.linear(16, 2),
    ])


def conv_flops_oracle(graph, masks):
    """Kernel-by-kernel tally, deliberately unvectorised."""
    total = 0
    shapes = graph.shapes
    for i, l in enumerate(graph.layers):
        if l.kind == "conv2d":
            _, ho, wo = shapes[i]
            for n in range(l.out_channels):
                for m in range(l.in_channels):
                    if i not in masks or masks[i][n, m]:
                        total += l.kernel_size * l.kernel_size * ho * wo
        elif l.kind == "linear":
            total += l.in_features * l.out_features
    return total


def test_single_conv_hand_value():
    assert metrics.flops_of_graph(one_conv_graph()) - 16 * 2 == 16 * 16 * 9 * 32 * 32 == 2_359_296


@pytest.mark.parametrize("depth", sorted(ANCHORS))
def test_resnet_anchor(depth):
    got = metrics.flops_of_graph(resnet_cifar(depth))
    assert abs(got - ANCHORS[depth]) / ANCHORS[depth] <= 0.02


def test_only_conv_and_linear_count():
    g = ModelGraph("m", (2, 4, 4), 3, [
        G.conv2d(2, 3, 3, padding=1), G.batchnorm2d(3), G.relu(), G.maxpool2d(2),
        G.global_avg_pool(), G.linear(3, 3),
    ])
    assert metrics.flops_of_graph(g) == 2 * 3 * 9 * 16 + 9


def test_all_true_masks_equal_baseline():
    g = resnet_cifar(20)
    masks = {j: np.ones((g.layers[j].out_channels, g.layers[j].in_channels), bool) for j in g.conv_layers()}
    assert metrics.flops_with_masks(g, masks) == metrics.flops_of_graph(g)
    assert metrics.flops_with_masks(g, None) == metrics.flops_of_graph(g)


def test_half_masks_halve_conv_flops():
    g = resnet_cifar(20)
    masks = {}
    for j in g.conv_layers():
        m = np.ones((g.layers[j].out_channels, g.layers[j].in_channels), bool)
        m[::2, :] = False  # every output width in the net is even
        masks[j] = m
    lin = sum(l.in_features * l.out_features for l in g.layers if l.kind == "linear")
    conv = metrics.flops_of_graph(g) - lin
    assert metrics.flops_with_masks(g, masks) - lin == conv // 2


def test_random_masks_match_oracle(rng):
    g = tinycnn()
    for _ in range(10):
        masks = {j: rng.random((g.layers[j].out_channels, g.layers[j].in_channels)) < 0.6 for j in g.conv_layers()}
        assert metrics.flops_with_masks(g, masks) == conv_flops_oracle(g, masks)


def test_masked_flops_monotone(rng):
    g = tinycnn()
    masks = {j: np.ones((g.layers[j].out_channels, g.layers[j].in_channels), bool) for j in g.conv_layers()}
    prev = metrics.flops_with_masks(g, masks)
    for _ in range(30):
        j = int(rng.choice(g.conv_layers()))
        n, m = (int(rng.integers(s)) for s in masks[j].shape)
        masks[j][n, m] = False
        cur = metrics.flops_with_masks(g, masks)
        assert cur <= prev
        prev = cur


def test_uniform_sparsity_scales_flops():
    g = tinycnn()
    s = 0.5
    masks = {}
    for j in g.conv_layers():
        m = np.ones((g.layers[j].out_channels, g.layers[j].in_channels), bool)
        m.reshape(-1)[: round(s * m.size)] = False
        masks[j] = m
    lin = sum(l.in_features * l.out_features for l in g.layers if l.kind == "linear")
    base = metrics.flops_of_graph(g) - lin
    got = metrics.flops_with_masks(g, masks) - lin
    slack = sum(g.layers[j].kernel_size ** 2 * g.shapes[j][1] * g.shapes[j][2] for j in g.conv_layers())
    assert abs(got - (1 - s) * base) <= slack


def test_misaligned_mask_rejected():
    g = tinycnn()
    with pytest.raises(UsageError):
        metrics.flops_with_masks(g, {0: np.ones((3, 3), bool)})
    with pytest.raises(UsageError):
        metrics.flops_with_masks(g, {1: np.ones((8, 1), bool)})


def test_unsupported_layer_kind():
    g = ModelGraph("bad", (1, 4, 4), 2, [G.LayerSpec(kind="dropout")])
    with pytest.raises(UsageError):
        metrics.flops_of_graph(g)


def test_param_count_tinycnn():
    g = tinycnn()
    expected = sum(int(np.prod(v.shape)) for v in init_state(g, 0).params.values())
    assert metrics.param_count(g) == expected


def test_sparsity_empty():
    s = metrics.sparsity(tinycnn())
    assert (s["kernel_sparsity"], s["param_sparsity"], s["fully_pruned_filters"]) == (0.0, 0.0, 0)


def test_sparsity_two_by_two():
    g = ModelGraph("s", (2, 4, 4), 2, [G.conv2d(2, 2, 3, padding=1), G.global_avg_pool(), G.linear(2, 2)])
    s = metrics.sparsity(g, {0: np.array([[True, False], [False, True]])})
    assert s["per_layer"][0] == 0.5 and s["kernel_sparsity"] == 0.5
    assert s["fully_pruned_filters"] == 0
    s = metrics.sparsity(g, {0: np.array([[True, True], [False, False]])})
    assert s["fully_pruned_filters"] == 1


def test_sparsity_matches_zero_count(rng):
    g = tinycnn()
    st = init_state(g, 1)
    masks = {}
    for j in g.conv_layers():
        m = rng.random((g.layers[j].out_channels, g.layers[j].in_channels)) < 0.5
        st.params[pname(j, "weight")][~m] = 0.0
        masks[j] = m
    s = metrics.sparsity(g, masks, st)
    zeros = total = 0
    for i, l in enumerate(g.layers):
        if l.kind in ("conv2d", "linear"):
            w = st.params[pname(i, "weight")]
            for v in w.reshape(-1):
                zeros += v == 0
                total += 1
    assert s["param_sparsity"] == zeros / total
    dead = sum(int((~m).sum()) for m in masks.values())
    assert s["kernel_sparsity"] == dead / sum(m.size for m in masks.values())
    # masks read back off the weights agree
    assert metrics.sparsity(g, state=st)["kernel_sparsity"] == s["kernel_sparsity"]


def test_empty_report_json(tmp_path):
    p = metrics.emit_report(metrics.MetricsReport(), "json", tmp_path / "r.json")
    doc = json.loads(p.read_text())
    assert doc["records"] == [] and doc["report_version"] == 1


def test_report_roundtrip(tmp_path):
    rep = metrics.MetricsReport(
        records=[{"epoch": 1, "train_loss": 0.5, "eval_accuracy": 0.9, "kernel_sparsity": 0.1}],
        meta={"seed": 3, "graph": "tinycnn", "config_hash": metrics.config_hash({"a": 1})},
    )
    metrics.emit_report(rep, "json", tmp_path / "r.json")
    back = metrics.load_report(tmp_path / "r.json")
    assert back == rep


def test_csv_rows(tmp_path):
    rep = metrics.MetricsReport(records=[{"epoch": e, "train_loss": 1.0 / e} for e in range(1, 6)])
    p = metrics.emit_report(rep, "csv", tmp_path / "r.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 6
    assert lines[0].split(",") == list(metrics.CSV_FIELDS)


def test_unknown_format(tmp_path):
    with pytest.raises(UsageError):
        metrics.emit_report(metrics.MetricsReport(), "xml", tmp_path / "r")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        metrics.emit_report(metrics.MetricsReport(), "json", tmp_path / "missing" / "r.json")


def test_no_temp_files_left(tmp_path):
    metrics.emit_report(metrics.MetricsReport(), "json", tmp_path / "r.json")
    assert [p.name for p in tmp_path.iterdir()] == ["r.json"]


def test_merge_reports(tmp_path):
    paths = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        rep = metrics.MetricsReport(records=[{"epoch": 1}, {"epoch": 2}], meta={"run": run})
        paths.append(metrics.emit_report(rep, "json", d / "report.json"))
    n = metrics.merge_reports(paths, tmp_path / "all.csv")
    rows = list(csv.DictReader(open(tmp_path / "all.csv")))
    assert n == 4 and [r["run"] for r in rows] == ["a", "a", "b", "b"]


def test_config_hash_stable():
    assert metrics.config_hash({"b": 1, "a": 2}) == metrics.config_hash({"a": 2, "b": 1})
    assert metrics.config_hash({"a": 1}) != metrics.config_hash({"a": 2})
