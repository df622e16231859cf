"""
Heterogeneous message-passing GNN over host-connection graphs.

Hosts and flows carry hidden states of width n. Each iteration sends a
message along every edge in both directions, transformed by the MLP of the
edge's type (msg_sf for source-to-flow edges, msg_fd for flow-to-destination
edges) with the receiver's state first. Messages are mean-aggregated per
receiver; hosts are updated by the upd_h GRU and flows by the upd_f GRU.
After T iterations the readout MLP maps each flow state to class logits.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

import model_io
from diff_engine import (
    ParameterStore,
    Tensor,
    add_dense_layers,
    add_gru,
    concat,
    gather_rows,
    gru_cell,
    mlp,
    segment_mean,
    softmax_rows,
)
from errors import ConfigError, ModelFormatError, NotFittedError, ShapeError, UsageError
from flow_ingest import ClassLabel
from graph_builder import EdgeType

logger = logging.getLogger(__name__)

MESSAGE_GROUPS = {EdgeType.SRC_TO_FLOW: "msg_sf", EdgeType.FLOW_TO_DST: "msg_fd"}
PARAMETER_GROUPS = ("msg_sf", "msg_fd", "upd_h", "upd_f", "readout")


@dataclass(frozen=True)
class GnnConfig:
    feature_count: int
    class_count: int
    hidden_dim: int = 128
    iterations: int = 8
    message_hidden: int = 128
    readout_hidden: tuple = (128, 64)
    flow_columns: tuple = None  # feature vector columns that seed flow states; None uses all

    def __post_init__(self):
        object.__setattr__(self, "readout_hidden", tuple(int(w) for w in self.readout_hidden))
        problems = []
        if self.flow_columns is not None:
            object.__setattr__(self, "flow_columns", tuple(int(c) for c in self.flow_columns))
            columns = self.flow_columns
            if not columns:
                problems.append("model.flow_features must name at least one feature")
            if len(set(columns)) != len(columns):
                problems.append(f"model.flow_features repeats a column: {list(columns)}")
            outside = [c for c in columns if not 0 <= c < self.feature_count]
            if outside:
                problems.append(f"flow columns {outside} are outside the {self.feature_count} input features")
        if self.hidden_dim < 1:
            problems.append(f"model.hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.state_feature_count > self.hidden_dim:
            problems.append(
                f"model.hidden_dim ({self.hidden_dim}) must be >= feature count ({self.state_feature_count})"
            )
        if self.iterations < 1:
            problems.append(f"model.iterations must be >= 1, got {self.iterations}")
        if self.message_hidden < 1:
            problems.append(f"model.message_hidden must be >= 1, got {self.message_hidden}")
        if len(self.readout_hidden) != 2 or min(self.readout_hidden) < 1:
            problems.append(f"model.readout_hidden must be two widths >= 1, got {list(self.readout_hidden)}")
        if self.class_count < 2:
            problems.append(f"class count must be >= 2, got {self.class_count}")
        if problems:
            raise ConfigError(problems)

    @property
    def state_feature_count(self):
        """Width of the feature block written into each initial flow state."""
        return self.feature_count if self.flow_columns is None else len(self.flow_columns)

    def to_dict(self):
        data = asdict(self)
        data["readout_hidden"] = list(self.readout_hidden)
        if self.flow_columns is not None:
            data["flow_columns"] = list(self.flow_columns)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def resolve_flow_columns(feature_names, flow_features):
    """
    Column indices of `flow_features` within the input feature vector.

    Args:
        feature_names: Names of the input feature vector, in order
        flow_features: Names seeding the flow states; None selects every input feature

    Returns:
        Tuple of indices, or None for every input feature

    Raises:
        ConfigError: a name is not among the input features
    """
    if flow_features is None:
        return None
    feature_names = list(feature_names)
    missing = [name for name in flow_features if name not in feature_names]
    if missing:
        raise ConfigError([f"model.flow_features: '{name}' is not a selected input feature" for name in missing])
    return tuple(feature_names.index(name) for name in flow_features)


def init_parameters(config, rng):
    """Glorot-uniform weights and zero biases, registered in canonical group order."""
    n = config.hidden_dim
    params = ParameterStore()
    add_dense_layers(params, "msg_sf", (2 * n, config.message_hidden, n), rng)
    add_dense_layers(params, "msg_fd", (2 * n, config.message_hidden, n), rng)
    add_gru(params, "upd_h", n, n, rng)
    add_gru(params, "upd_f", n, n, rng)
    add_dense_layers(params, "readout", (n,) + config.readout_hidden + (config.class_count,), rng)
    return params


@dataclass
class HiddenStates:
    """Node states in canonical order (hosts, then flows) at iteration `iteration`."""

    values: Tensor
    iteration: int = 0


class MessagePlan(NamedTuple):
    receivers: np.ndarray
    senders: np.ndarray
    type_rows: dict
    restore: np.ndarray


def message_plan(graph):
    """
    Both directions of every edge, sorted by (receiver, sender).

    type_rows[t] selects the sorted messages carried by edges of type t;
    stacking the per-type blocks in EdgeType order and gathering `restore`
    gives back the sorted order.
    """
    a = graph.edge_index[:, 0]
    b = graph.edge_index[:, 1]
    receivers = np.concatenate([a, b])
    senders = np.concatenate([b, a])
    types = np.concatenate([graph.edge_types, graph.edge_types])
    order = np.lexsort((senders, receivers))
    receivers, senders, types = receivers[order], senders[order], types[order]
    type_rows = {t: np.flatnonzero(types == t) for t in EdgeType}
    stacked = np.concatenate([type_rows[t] for t in EdgeType])
    return MessagePlan(receivers, senders, type_rows, np.argsort(stacked, kind="stable"))


def init_hidden_states(graph, config):
    """
    Flow nodes start from their zero-padded feature vector (restricted to
    config.flow_columns when set), hosts from all ones.

    Raises:
        ConfigError: the feature vectors are longer than hidden_dim
        ShapeError: the graph's feature width differs from the configured one
    """
    n = config.hidden_dim
    features = graph.flow_features
    if config.flow_columns is not None:
        if features.shape[1] != config.feature_count:
            raise ShapeError(
                f"graph flow features have width {features.shape[1]}, model expects {config.feature_count}"
            )
        features = features[:, list(config.flow_columns)]
    k = features.shape[1]
    if k > n:
        raise ConfigError(f"flow features have length {k}, longer than hidden_dim {n}")
    values = np.zeros((graph.host_count + graph.flow_count, n), dtype=np.float64)
    values[:graph.host_count] = 1.0
    values[graph.host_count:, :k] = features
    return HiddenStates(Tensor(values), 0)


def message_pass(states, graph, params, config, plan=None):
    """One message-passing iteration; returns the states at iteration t + 1."""
    if states.iteration >= config.iterations:
        raise UsageError(
            f"message_pass called at iteration {states.iteration}, beyond the configured {config.iterations}"
        )
    plan = plan if plan is not None else message_plan(graph)
    h = states.values

    blocks = []
    for edge_type in EdgeType:
        rows = plan.type_rows[edge_type]
        if rows.size == 0:
            continue
        pairs = concat(
            [gather_rows(h, plan.receivers[rows]), gather_rows(h, plan.senders[rows])], axis=1
        )
        blocks.append(mlp(pairs, params, MESSAGE_GROUPS[edge_type], 2))
    messages = gather_rows(concat(blocks, axis=0), plan.restore)
    aggregate = segment_mean(messages, plan.receivers, graph.host_count + graph.flow_count)

    hosts = np.arange(graph.host_count)
    flows = np.arange(graph.host_count, graph.host_count + graph.flow_count)
    new_hosts = gru_cell(gather_rows(h, hosts), gather_rows(aggregate, hosts), params.gru("upd_h"))
    new_flows = gru_cell(gather_rows(h, flows), gather_rows(aggregate, flows), params.gru("upd_f"))
    return HiddenStates(concat([new_hosts, new_flows], axis=0), states.iteration + 1)


def forward(graph, params, config):
    """Per-flow class logits [flow count x C]; softmax is left to the loss and predict."""
    plan = message_plan(graph)
    states = init_hidden_states(graph, config)
    for _ in range(config.iterations):
        states = message_pass(states, graph, params, config, plan)
    flows = np.arange(graph.host_count, graph.host_count + graph.flow_count)
    return mlp(gather_rows(states.values, flows), params, "readout", 3, final_activation=None)


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of several graphs: all hosts first, then all flows."""

    host_count: int
    flow_count: int
    flow_features: np.ndarray
    flow_labels: np.ndarray
    edge_index: np.ndarray
    edge_types: np.ndarray
    flow_offsets: tuple

    @property
    def node_count(self):
        return self.host_count + self.flow_count

    def split_flows(self, values):
        """Cut a per-flow array back into one block per member graph."""
        return [values[start:stop] for start, stop in zip(self.flow_offsets[:-1], self.flow_offsets[1:])]


def batch_graphs(graphs):
    graphs = list(graphs)
    if not graphs:
        raise UsageError("batch_graphs needs at least one graph")
    total_hosts = sum(g.host_count for g in graphs)
    host_offset = 0
    flow_offset = 0
    offsets = [0]
    edges = []
    for g in graphs:
        remap = np.empty(g.node_count, dtype=np.int64)
        remap[:g.host_count] = host_offset + np.arange(g.host_count)
        remap[g.host_count:] = total_hosts + flow_offset + np.arange(g.flow_count)
        edges.append(remap[g.edge_index])
        host_offset += g.host_count
        flow_offset += g.flow_count
        offsets.append(flow_offset)
    return GraphBatch(
        host_count=total_hosts,
        flow_count=flow_offset,
        flow_features=np.concatenate([g.flow_features for g in graphs], axis=0),
        flow_labels=np.concatenate([g.flow_labels for g in graphs]),
        edge_index=np.concatenate(edges, axis=0),
        edge_types=np.concatenate([g.edge_types for g in graphs]),
        flow_offsets=tuple(offsets),
    )


@dataclass
class GnnModel:
    config: GnnConfig
    params: ParameterStore
    class_names: tuple
    fitted: bool = False
    history: list = field(default_factory=list, repr=False)

    @property
    def class_count(self):
        return self.config.class_count

    def require_fitted(self):
        if not self.fitted:
            raise NotFittedError("GNN model has not been trained or loaded")

    def logits(self, graph):
        return forward(graph, self.params, self.config).data

    def predict_arrays(self, graph):
        """(predicted class indices, probability rows) for every flow of a graph or batch."""
        probabilities = softmax_rows(self.logits(graph))
        return np.argmax(probabilities, axis=1), probabilities


def new_model(config, class_names, rng):
    if len(class_names) != config.class_count:
        raise ConfigError(f"{len(class_names)} class names for {config.class_count} classes")
    return GnnModel(config, init_parameters(config, rng), tuple(class_names))


def predict(graph, model):
    """
    Per flow: (ClassLabel, probability vector).

    Ties between equal probabilities go to the lowest class index.
    """
    predicted, probabilities = model.predict_arrays(graph)
    return [
        (ClassLabel(int(c), model.class_names[int(c)]), probabilities[i])
        for i, c in enumerate(predicted)
    ]


def save_model(model, path):
    return model_io.write_envelope(path, "gnn", {
        "config": model.config.to_dict(),
        "class_names": list(model.class_names),
        "parameters": model_io.encode_arrays(model.params.to_arrays()),
    })


def load_model(path):
    document = model_io.read_envelope(path, expected_kind="gnn")
    config = GnnConfig.from_dict(document["config"])
    reference = init_parameters(config, np.random.default_rng(0))
    arrays = model_io.decode_arrays(document["parameters"])
    if list(arrays) != reference.names():
        raise ModelFormatError(f"Model file {path} does not match the GNN parameter layout")
    params = ParameterStore()
    for name, value in arrays.items():
        params.add(name, value)
    # shape check against the layout the config implies
    reference.assign(arrays)
    return GnnModel(config, params, tuple(document["class_names"]), fitted=True)
