import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from diff_engine import GradientTape, backward, grad_check, softmax_cross_entropy
from errors import ChecksumError, ConfigError, FormatVersionError, ShapeError, UsageError
from gnn_model import (
    GnnConfig,
    batch_graphs,
    forward,
    init_hidden_states,
    init_parameters,
    load_model,
    message_pass,
    new_model,
    predict,
    resolve_flow_columns,
    save_model,
)
from graph_builder import EdgeType, build_graph

CLASS_NAMES = ("Benign", "DDoS", "PortScan")


def graph_of(pairs, features):
    graph = build_graph([_Flow(src, dst, i) for i, (src, dst) in enumerate(pairs)])
    return replace(
        graph,
        flow_features=np.asarray(features, dtype=np.float64),
        flow_labels=np.zeros(len(pairs), dtype=np.int64),
    )


class _Flow:
    def __init__(self, src_ip, dst_ip, position):
        self.src_ip = src_ip
        self.dst_ip = dst_ip
        self.position = position


def ddos_graph(rng, attackers=("a1", "a2", "a3")):
    pairs = [(a, "victim") for a in attackers]
    return graph_of(pairs, rng.normal(size=(len(pairs), 3)))


def reference_forward(graph, params, config):
    """Node-by-node loop implementation used as an oracle."""
    p = {name: t.data for name, t in params.items()}
    n = config.hidden_dim

    def dense_stack(x, group, layers, final_relu):
        for i in range(layers):
            x = x @ p[f"{group}.w{i}"] + p[f"{group}.b{i}"]
            if i < layers - 1 or final_relu:
                x = np.maximum(x, 0.0)
        return x

    def gru(h, a, group):
        gx = a @ p[f"{group}.w_input"] + p[f"{group}.b_input"]
        gh = h @ p[f"{group}.w_hidden"] + p[f"{group}.b_hidden"]
        z = expit(gx[:n] + gh[:n])
        r = expit(gx[n:2 * n] + gh[n:2 * n])
        c = np.tanh(gx[2 * n:] + r * gh[2 * n:])
        return (1 - z) * h + z * c

    node_count = graph.host_count + graph.flow_count
    h = np.zeros((node_count, n))
    h[:graph.host_count] = 1.0
    h[graph.host_count:, :graph.feature_count] = graph.flow_features
    neighbors = [[] for _ in range(node_count)]
    for (a, b), t in zip(graph.edge_index, graph.edge_types):
        group = "msg_sf" if t == EdgeType.SRC_TO_FLOW else "msg_fd"
        neighbors[a].append((b, group))
        neighbors[b].append((a, group))
    for _ in range(config.iterations):
        new = np.empty_like(h)
        for i in range(node_count):
            messages = [dense_stack(np.concatenate([h[i], h[j]]), g, 2, True) for j, g in sorted(neighbors[i])]
            a = np.mean(messages, axis=0) if messages else np.zeros(n)
            new[i] = gru(h[i], a, "upd_h" if i < graph.host_count else "upd_f")
        h = new
    return np.array([dense_stack(h[i], "readout", 3, False) for i in range(graph.host_count, node_count)])


def test_initial_states_pad_flows_and_fill_hosts():
    config = GnnConfig(feature_count=2, class_count=2, hidden_dim=4, iterations=1,
                       message_hidden=2, readout_hidden=(2, 2))
    graph = graph_of([("A", "B")], [[0.5, -1.2]])
    states = init_hidden_states(graph, config).values.data
    assert states[0].tolist() == [1.0, 1.0, 1.0, 1.0]
    assert states[2].tolist() == [0.5, -1.2, 0.0, 0.0]
    with pytest.raises(ConfigError):
        init_hidden_states(graph_of([("A", "B")], [[0.0] * 5]), config)


def test_flow_columns_pick_the_seeding_features():
    config = GnnConfig(feature_count=4, class_count=2, hidden_dim=3, iterations=1,
                       message_hidden=2, readout_hidden=(2, 2), flow_columns=(3, 1))
    assert config.state_feature_count == 2
    graph = graph_of([("A", "B")], [[0.5, -1.2, 7.0, 2.5]])
    states = init_hidden_states(graph, config).values.data
    assert states[2].tolist() == [2.5, -1.2, 0.0]
    with pytest.raises(ShapeError):
        init_hidden_states(graph_of([("A", "B")], [[0.5, -1.2, 2.5]]), config)


def test_flow_columns_ignore_other_features(tiny_config, jittered_params):
    config = replace(tiny_config, flow_columns=(0, 2))
    params = jittered_params(config, seed=12)
    rng = np.random.default_rng(12)
    pairs = [("a1", "v"), ("a2", "v"), ("v", "a1")]
    features = rng.normal(size=(3, 3))
    shifted = features.copy()
    shifted[:, 1] += 50.0
    np.testing.assert_array_equal(
        forward(graph_of(pairs, shifted), params, config).data,
        forward(graph_of(pairs, features), params, config).data,
    )


def test_flow_columns_are_validated():
    with pytest.raises(ConfigError) as info:
        GnnConfig(feature_count=3, class_count=2, hidden_dim=1, flow_columns=(0, 0, 5))
    problems = " ".join(info.value.problems)
    assert "repeats" in problems and "outside" in problems and "hidden_dim" in problems
    with pytest.raises(ConfigError):
        GnnConfig(feature_count=3, class_count=2, flow_columns=())


def test_flow_features_resolve_by_name():
    names = ("Flow Bytes/s", "Total Fwd Packets", "SYN Flag Count")
    assert resolve_flow_columns(names, ("SYN Flag Count", "Total Fwd Packets")) == (2, 1)
    assert resolve_flow_columns(names, None) is None
    with pytest.raises(ConfigError, match="RST Flag Count"):
        resolve_flow_columns(names, ("RST Flag Count",))


def test_features_fill_state_when_sizes_match():
    config = GnnConfig(feature_count=2, class_count=2, hidden_dim=2, iterations=1,
                       message_hidden=2, readout_hidden=(2, 2))
    states = init_hidden_states(graph_of([("A", "B")], [[0.3, 0.7]]), config).values.data
    assert states[2].tolist() == [0.3, 0.7]


def test_single_flow_hand_trace():
    config = GnnConfig(feature_count=2, class_count=2, hidden_dim=2, iterations=1,
                       message_hidden=2, readout_hidden=(2, 2))
    params = init_parameters(config, np.random.default_rng(0))
    for _, tensor in params.items():
        tensor.data = np.zeros(tensor.shape)
    params["msg_sf.b1"].data = np.array([1.0, 0.0])
    params["upd_f.w_input"].data[:, 4:6] = np.eye(2)
    for i in range(3):
        params[f"readout.w{i}"].data = np.eye(2)
    graph = graph_of([("A", "B")], [[0.8, -0.4]])

    # flow aggregate: mean of msg_sf = [1, 0] and msg_fd = [0, 0]; gates sit at 0.5
    expected = [0.5 * 0.8 + 0.5 * math.tanh(0.5), 0.0]
    logits = forward(graph, params, config).data
    np.testing.assert_allclose(logits[0], expected, rtol=0, atol=1e-12)


def test_forward_matches_loop_reference(tiny_config, jittered_params):
    rng = np.random.default_rng(4)
    params = jittered_params(tiny_config, seed=1)
    graph = graph_of([("a1", "v"), ("a2", "v"), ("a3", "v"), ("v", "a1")], rng.normal(size=(4, 3)))
    np.testing.assert_allclose(
        forward(graph, params, tiny_config).data, reference_forward(graph, params, tiny_config),
        rtol=0, atol=1e-10,
    )


def test_single_neighbor_aggregate_is_its_message(tiny_config, jittered_params):
    params = jittered_params(tiny_config)
    n = tiny_config.hidden_dim
    # host update becomes tanh(aggregate): update gate open, no recurrent term
    params["upd_h.w_hidden"].data[:] = 0.0
    params["upd_h.b_hidden"].data[:] = 0.0
    params["upd_h.b_input"].data[:] = 0.0
    params["upd_h.b_input"].data[:n] = 1e3
    params["upd_h.w_input"].data[:] = 0.0
    params["upd_h.w_input"].data[:, 2 * n:] = np.eye(n)
    graph = graph_of([("A", "B")], [[0.1, 0.2, 0.3]])
    states = init_hidden_states(graph, tiny_config)
    after = message_pass(states, graph, params, tiny_config)

    h = states.values.data
    pair = np.concatenate([h[0], h[2]])
    hidden = np.maximum(pair @ params["msg_sf.w0"].data + params["msg_sf.b0"].data, 0.0)
    message = np.maximum(hidden @ params["msg_sf.w1"].data + params["msg_sf.b1"].data, 0.0)
    assert after.iteration == 1
    np.testing.assert_allclose(after.values.data[0], np.tanh(message), rtol=0, atol=1e-12)


def test_message_pass_beyond_iterations_is_refused(tiny_config, jittered_params):
    params = jittered_params(tiny_config)
    graph = graph_of([("A", "B")], [[0.1, 0.2, 0.3]])
    states = init_hidden_states(graph, tiny_config)
    for _ in range(tiny_config.iterations):
        states = message_pass(states, graph, params, tiny_config)
    with pytest.raises(UsageError):
        message_pass(states, graph, params, tiny_config)


def test_closed_flow_gate_keeps_flow_states(tiny_config, jittered_params):
    params = jittered_params(tiny_config)
    n = tiny_config.hidden_dim
    params["upd_f.b_input"].data[:n] = -1e3
    graph = graph_of([("A", "B"), ("B", "C")], [[0.1, 0.2, 0.3], [-1.0, 0.0, 2.0]])
    before = init_hidden_states(graph, tiny_config)
    after = message_pass(before, graph, params, tiny_config)
    np.testing.assert_array_equal(after.values.data[graph.host_count:], before.values.data[graph.host_count:])


def random_graph(rng, max_hosts=8, max_flows=24):
    """Random window over a few hosts; self-loops and repeated pairs allowed."""
    names = [f"h{i}" for i in range(rng.integers(1, max_hosts + 1))]
    flow_count = int(rng.integers(1, max_flows + 1))
    pairs = [(names[rng.integers(len(names))], names[rng.integers(len(names))]) for _ in range(flow_count)]
    return pairs, rng.normal(size=(flow_count, 3))


@pytest.mark.parametrize("seed", range(100))
def test_permuted_input_order_gives_same_flow_logits(tiny_config, jittered_params, seed):
    rng = np.random.default_rng(1000 + seed)
    params = jittered_params(tiny_config, seed=2)
    pairs, features = random_graph(rng)
    order = rng.permutation(len(pairs))
    original = forward(graph_of(pairs, features), params, tiny_config).data
    permuted = forward(graph_of([pairs[i] for i in order], features[order]), params, tiny_config).data
    np.testing.assert_allclose(permuted, original[order], rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_renaming_hosts_leaves_logits_unchanged(tiny_config, jittered_params, seed):
    rng = np.random.default_rng(2000 + seed)
    params = jittered_params(tiny_config, seed=3)
    pairs, features = random_graph(rng)
    hosts = sorted({host for pair in pairs for host in pair})
    addresses = rng.choice(2**32, size=len(hosts), replace=False)
    renaming = {
        host: ".".join(str((int(value) >> shift) & 255) for shift in (24, 16, 8, 0))
        for host, value in zip(hosts, addresses)
    }
    renamed = [(renaming[src], renaming[dst]) for src, dst in pairs]
    np.testing.assert_array_equal(
        forward(graph_of(renamed, features), params, tiny_config).data,
        forward(graph_of(pairs, features), params, tiny_config).data,
    )


def test_identical_components_get_identical_logits(tiny_config, jittered_params):
    params = jittered_params(tiny_config, seed=4)
    features = [[0.5, -0.5, 1.0], [0.5, -0.5, 1.0]]
    logits = forward(graph_of([("A", "B"), ("C", "D")], features), params, tiny_config).data
    np.testing.assert_allclose(logits[0], logits[1], rtol=0, atol=1e-12)


def test_merging_attackers_changes_outputs(tiny_config, jittered_params):
    rng = np.random.default_rng(7)
    params = jittered_params(tiny_config, seed=5)
    graph = ddos_graph(rng)
    merged = graph_of([("a1", "victim"), ("a1", "victim"), ("a3", "victim")], graph.flow_features)
    assert not np.allclose(forward(graph, params, tiny_config).data, forward(merged, params, tiny_config).data)


def test_batched_forward_matches_per_graph(tiny_config, jittered_params):
    rng = np.random.default_rng(8)
    params = jittered_params(tiny_config, seed=6)
    graphs = [ddos_graph(rng), graph_of([("x", "y"), ("y", "z")], rng.normal(size=(2, 3)))]
    batch = batch_graphs(graphs)
    pieces = batch.split_flows(forward(batch, params, tiny_config).data)
    for graph, piece in zip(graphs, pieces):
        np.testing.assert_allclose(piece, forward(graph, params, tiny_config).data, rtol=0, atol=1e-10)


def test_every_group_receives_gradient(tiny_config, jittered_params):
    rng = np.random.default_rng(9)
    params = jittered_params(tiny_config, seed=7)
    graph = ddos_graph(rng)
    with GradientTape():
        loss = softmax_cross_entropy(forward(graph, params, tiny_config), [1, 1, 0])
    grads = backward(loss, params)
    for group, names in params.groups().items():
        assert any(np.any(grads[name] != 0.0) for name in names), group


def test_gnn_gradients_match_finite_differences(jittered_params):
    config = GnnConfig(feature_count=3, class_count=3, hidden_dim=8, iterations=2,
                       message_hidden=8, readout_hidden=(8, 8))
    rng = np.random.default_rng(10)
    params = jittered_params(config, seed=8)
    graph = graph_of([("a", "v"), ("b", "v"), ("v", "a")], rng.normal(size=(3, 3)))

    def loss():
        return softmax_cross_entropy(forward(graph, params, config), [1, 2, 0])

    result = grad_check(loss, params, samples_per_group=60)
    assert set(result.per_group) == {"msg_sf", "msg_fd", "upd_h", "upd_f", "readout"}
    for group, error in result.per_group.items():
        assert error < 1e-4, (group, result.parameter, result.index)


def test_predict_ties_go_to_lowest_class(tiny_config):
    model = new_model(tiny_config, CLASS_NAMES, np.random.default_rng(0))
    model.params["readout.w2"].data[:] = 0.0
    predictions = predict(graph_of([("A", "B")], [[1.0, 2.0, 3.0]]), model)
    label, probabilities = predictions[0]
    assert (label.index, label.name) == (0, "Benign")
    np.testing.assert_allclose(probabilities, [1 / 3] * 3)


def test_predict_follows_dominant_logit(tiny_config):
    model = new_model(tiny_config, CLASS_NAMES, np.random.default_rng(0))
    model.params["readout.w2"].data[:] = 0.0
    model.params["readout.b2"].data = np.array([0.0, 10.0, 0.0])
    label, probabilities = predict(graph_of([("A", "B")], [[1.0, 2.0, 3.0]]), model)[0]
    assert label.name == "DDoS"
    assert probabilities[1] > 0.999


def test_config_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        GnnConfig(feature_count=10, class_count=1, hidden_dim=4, iterations=0)
    assert len(info.value.problems) == 3


def test_model_file_keeps_flow_columns(tmp_path, tiny_config):
    config = replace(tiny_config, flow_columns=(2, 0))
    model = new_model(config, CLASS_NAMES, np.random.default_rng(13))
    loaded = load_model(save_model(model, tmp_path / "gnn.json"))
    assert loaded.config.flow_columns == (2, 0)
    graph = graph_of([("A", "B"), ("B", "C")], [[1.0, 5.0, -2.0], [0.5, 9.0, 3.0]])
    np.testing.assert_array_equal(loaded.logits(graph), model.logits(graph))


def test_model_file_round_trip(tmp_path, tiny_config, jittered_params):
    rng = np.random.default_rng(11)
    model = new_model(tiny_config, CLASS_NAMES, rng)
    model.params.assign(jittered_params(tiny_config, seed=9).to_arrays())
    path = save_model(model, tmp_path / "gnn.json")
    loaded = load_model(path)
    assert loaded.fitted
    assert loaded.config == model.config
    assert loaded.class_names == CLASS_NAMES
    graph = ddos_graph(rng)
    np.testing.assert_array_equal(loaded.logits(graph), model.logits(graph))


def test_model_file_version_and_truncation(tmp_path, tiny_config):
    model = new_model(tiny_config, CLASS_NAMES, np.random.default_rng(0))
    path = save_model(model, tmp_path / "gnn.json")
    text = path.read_text()

    bumped = tmp_path / "bumped.json"
    document = json.loads(text)
    document["format_version"] = 2
    bumped.write_text(json.dumps(document))
    with pytest.raises(FormatVersionError):
        load_model(bumped)

    truncated = tmp_path / "truncated.json"
    truncated.write_text(text[: len(text) // 2])
    with pytest.raises(ChecksumError):
        load_model(truncated)

    tampered = tmp_path / "tampered.json"
    document = json.loads(text)
    document["class_names"][0] = "Other"
    tampered.write_text(json.dumps(document))
    with pytest.raises(ChecksumError):
        load_model(tampered)
