import json

import numpy as np
import pytest

from errors import ValidationError
from graph_builder import (
    EdgeType,
    build_graph,
    downsample_benign,
    graph_stats,
    host_degrees,
    make_samples,
    window_flows,
    window_flows_by_time,
    write_graph_dump,
)


def test_three_flow_triangle(make_record):
    flows = [make_record("A", "B"), make_record("A", "C"), make_record("B", "C")]
    graph = build_graph(flows)
    assert graph.hosts == ("A", "B", "C")
    assert (graph.host_count, graph.flow_count, graph.edge_count) == (3, 3, 6)
    assert [tuple(e) for e in graph.edges] == [
        (0, 3, EdgeType.SRC_TO_FLOW), (3, 1, EdgeType.FLOW_TO_DST),
        (0, 4, EdgeType.SRC_TO_FLOW), (4, 2, EdgeType.FLOW_TO_DST),
        (1, 5, EdgeType.SRC_TO_FLOW), (5, 2, EdgeType.FLOW_TO_DST),
    ]
    assert host_degrees(graph).tolist() == [2, 2, 2]


def test_self_loop_flow_has_one_host(make_record):
    graph = build_graph([make_record("A", "A")])
    assert graph.host_count == 1
    assert graph.edge_count == 2
    assert graph.edge_index.tolist() == [[0, 1], [1, 0]]


def test_flow_nodes_follow_input_order_and_encoding(make_record, synthetic_encoder):
    flows = [make_record("A", "B", label="DDoS"), make_record("C", "B", label="BENIGN")]
    graph = build_graph(flows, synthetic_encoder)
    assert graph.flow_labels.tolist() == [1, 0]
    assert graph.flow_features.shape == (2, synthetic_encoder.feature_count)
    assert graph.flow_nodes[0].record is flows[0]
    assert graph.flow_node_id(1) == 4


def test_every_flow_has_exactly_two_edges(small_dataset):
    graph = build_graph(small_dataset.windows[0])
    flow_ids = graph.edge_index[graph.edge_index >= graph.host_count]
    counts = np.bincount(flow_ids - graph.host_count, minlength=graph.flow_count)
    assert counts.tolist() == [2] * graph.flow_count
    assert graph.edge_count == 2 * graph.flow_count


def test_random_windows_match_brute_force_adjacency(make_record):
    rng = np.random.default_rng(42)
    for _ in range(1000):
        names = [f"10.0.{rng.integers(256)}.{i}" for i in range(rng.integers(1, 9))]
        pairs = [
            (names[rng.integers(len(names))], names[rng.integers(len(names))])
            for _ in range(rng.integers(1, 25))
        ]
        graph = build_graph([make_record(src, dst) for src, dst in pairs])

        hosts = []
        for src, dst in pairs:
            hosts += [h for h in (src, dst) if h not in hosts]
        assert graph.hosts == tuple(hosts)
        position = {host: i for i, host in enumerate(hosts)}

        base = len(hosts)
        expected = np.full((base + len(pairs), base + len(pairs)), -1)
        for p, (src, dst) in enumerate(pairs):
            expected[position[src], base + p] = EdgeType.SRC_TO_FLOW
            expected[base + p, position[dst]] = EdgeType.FLOW_TO_DST
        actual = np.full_like(expected, -1)
        for a, b, kind in graph.edges:
            assert actual[a, b] == -1
            actual[a, b] = kind
        np.testing.assert_array_equal(actual, expected)

        canonical = []
        for p, (src, dst) in enumerate(pairs):
            canonical += [
                (position[src], base + p, EdgeType.SRC_TO_FLOW),
                (base + p, position[dst], EdgeType.FLOW_TO_DST),
            ]
        assert [tuple(e) for e in graph.edges] == canonical


def test_empty_flow_set_is_rejected():
    with pytest.raises(ValidationError):
        build_graph([])


def test_window_flows_keeps_tail():
    windows = window_flows(list(range(450)), 200)
    assert [len(w) for w in windows] == [200, 200, 50]
    with pytest.raises(ValidationError):
        window_flows([1], 0)


def test_window_flows_by_time(make_record):
    records = [make_record(timestamp=t) for t in (0.0, 1.0, 9.9, 10.0, 35.0)]
    windows = window_flows_by_time(records, 10.0)
    assert [[r.timestamp for r in w] for w in windows] == [[0.0, 1.0, 9.9], [10.0], [35.0]]


def test_benign_only_flag(make_record, synthetic_encoder):
    windows = [[make_record(label="BENIGN")], [make_record(label="BENIGN"), make_record(label="PortScan")]]
    samples = make_samples(windows, synthetic_encoder, first_window_id=5)
    assert [(s.window_id, s.benign_only) for s in samples] == [(5, True), (6, False)]


def test_downsample_keeps_every_attack_sample(make_record, synthetic_encoder):
    windows = [[make_record(label="BENIGN")]] * 1000 + [[make_record(label="DDoS")]] * 10
    samples = make_samples(windows, synthetic_encoder)
    kept = downsample_benign(samples, 0.9, np.random.default_rng(0))
    attacks = [s for s in kept if not s.benign_only]
    benign = [s for s in kept if s.benign_only]
    assert len(attacks) == 10
    assert 70 <= len(benign) <= 130
    assert downsample_benign(samples, 0.0, np.random.default_rng(0)) == samples
    with pytest.raises(ValidationError):
        downsample_benign(samples, 1.0, np.random.default_rng(0))


def test_graph_stats_counts_components(make_record):
    graph = build_graph([make_record("A", "B"), make_record("C", "D"), make_record("A", "E")])
    stats = graph_stats(graph)
    assert stats.component_count == 2
    assert stats.max_host_degree == 2
    assert (stats.host_count, stats.flow_count, stats.edge_count) == (5, 3, 6)


def test_graph_dump_is_one_line_per_sample(tmp_path, make_record, synthetic_encoder):
    samples = make_samples([[make_record("A", "B")], [make_record("B", "C")]], synthetic_encoder)
    path = write_graph_dump(samples, tmp_path / "graphs.jsonl")
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line["window_id"] for line in lines] == [0, 1]
    assert lines[0]["edges"] == [[0, 2, "SRC_TO_FLOW"], [2, 1, "FLOW_TO_DST"]]
