"""
Host-connection graphs: one node per distinct host, one node per flow, and
two typed edges per flow (source host to flow, flow to destination host).
"""

import json
import logging
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_SIZE = 200


class EdgeType(IntEnum):
    SRC_TO_FLOW = 0
    FLOW_TO_DST = 1


class Edge(NamedTuple):
    a: int
    b: int
    type: EdgeType


class FlowNode(NamedTuple):
    features: np.ndarray
    label: int
    record: object


@dataclass(frozen=True)
class HostConnectionGraph:
    """
    Immutable host-connection graph in canonical node order.

    Node ids 0..H-1 are hosts in first-appearance order, H..H+F-1 are flows
    in input order. Host addresses are topology keys only.
    """

    hosts: tuple
    flow_features: np.ndarray
    flow_labels: np.ndarray
    flow_records: tuple
    edge_index: np.ndarray
    edge_types: np.ndarray

    @property
    def host_count(self):
        return len(self.hosts)

    @property
    def flow_count(self):
        return len(self.flow_records)

    @property
    def node_count(self):
        return self.host_count + self.flow_count

    @property
    def edge_count(self):
        return len(self.edge_types)

    @property
    def feature_count(self):
        return self.flow_features.shape[1]

    @property
    def flow_nodes(self):
        return [
            FlowNode(self.flow_features[i], int(self.flow_labels[i]), self.flow_records[i])
            for i in range(self.flow_count)
        ]

    @property
    def edges(self):
        return [
            Edge(int(a), int(b), EdgeType(int(t)))
            for (a, b), t in zip(self.edge_index, self.edge_types)
        ]

    def flow_node_id(self, flow_position):
        return self.host_count + flow_position


@dataclass(frozen=True)
class GraphSample:
    graph: HostConnectionGraph
    window_id: int
    benign_only: bool


@dataclass(frozen=True)
class GraphStats:
    host_count: int
    flow_count: int
    edge_count: int
    max_host_degree: int
    component_count: int


def window_flows(records, window_size=DEFAULT_WINDOW_SIZE):
    """
    Split timestamp-ordered records into consecutive non-overlapping chunks.

    The final partial chunk is kept.
    """
    if window_size < 1:
        raise ValidationError(f"window_size must be >= 1, got {window_size}")
    records = list(records)
    return [records[i:i + window_size] for i in range(0, len(records), window_size)]


def window_flows_by_time(records, seconds):
    """Consecutive fixed-duration windows anchored at the first timestamp; empty windows are skipped."""
    if seconds <= 0:
        raise ValidationError(f"window duration must be positive, got {seconds}")
    records = list(records)
    if not records:
        return []
    origin = records[0].timestamp
    windows = []
    current = []
    current_slot = 0
    for record in records:
        slot = int((record.timestamp - origin) // seconds)
        if slot != current_slot and current:
            windows.append(current)
            current = []
        current_slot = slot
        current.append(record)
    if current:
        windows.append(current)
    return windows


def sort_by_time(records):
    """Stable timestamp sort, keeping file order among equal timestamps."""
    return sorted(records, key=lambda r: r.timestamp)


def build_graph(flows, encoder=None):
    """
    Build the host-connection graph of a flow set.

    Args:
        flows: Non-empty sequence of RawFlowRecord
        encoder: FlowEncoder giving each flow node its feature vector and class;
            without one, flow nodes carry empty feature vectors and label 0

    Returns:
        HostConnectionGraph
    """
    flows = list(flows)
    if not flows:
        raise ValidationError("Cannot build a graph from an empty flow set")

    host_ids = {}
    for record in flows:
        for address in (record.src_ip, record.dst_ip):
            if address not in host_ids:
                host_ids[address] = len(host_ids)

    host_count = len(host_ids)
    edge_index = np.empty((2 * len(flows), 2), dtype=np.int64)
    edge_types = np.empty(2 * len(flows), dtype=np.int64)
    for position, record in enumerate(flows):
        flow_id = host_count + position
        edge_index[2 * position] = (host_ids[record.src_ip], flow_id)
        edge_types[2 * position] = EdgeType.SRC_TO_FLOW
        edge_index[2 * position + 1] = (flow_id, host_ids[record.dst_ip])
        edge_types[2 * position + 1] = EdgeType.FLOW_TO_DST

    if encoder is not None:
        features, labels = encoder.encode_many(flows)
    else:
        features = np.zeros((len(flows), 0), dtype=np.float64)
        labels = np.zeros(len(flows), dtype=np.int64)

    return HostConnectionGraph(
        hosts=tuple(host_ids),
        flow_features=features,
        flow_labels=labels,
        flow_records=tuple(flows),
        edge_index=edge_index,
        edge_types=edge_types,
    )


def make_samples(windows, encoder, first_window_id=0):
    """Build one GraphSample per non-empty window."""
    samples = []
    for offset, window in enumerate(windows):
        if not window:
            continue
        graph = build_graph(window, encoder)
        samples.append(GraphSample(
            graph=graph,
            window_id=first_window_id + offset,
            benign_only=bool(np.all(graph.flow_labels == 0)),
        ))
    return samples


def downsample_benign(samples, drop_rate, rng):
    """
    Drop each benign-only sample independently with probability drop_rate.

    Samples containing any attack flow are always kept. Apply to the training
    partition only.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValidationError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if drop_rate == 0.0:
        return list(samples)
    kept = [s for s in samples if not s.benign_only or rng.random() >= drop_rate]
    logger.info("Benign downsampling kept %d of %d graph samples", len(kept), len(samples))
    return kept


def host_degrees(graph):
    degrees = np.zeros(graph.node_count, dtype=np.int64)
    np.add.at(degrees, graph.edge_index[:, 0], 1)
    np.add.at(degrees, graph.edge_index[:, 1], 1)
    return degrees[:graph.host_count]


def graph_stats(graph):
    n = graph.node_count
    adjacency = coo_matrix(
        (np.ones(graph.edge_count), (graph.edge_index[:, 0], graph.edge_index[:, 1])),
        shape=(n, n),
    )
    components, _ = connected_components(adjacency, directed=False)
    degrees = host_degrees(graph)
    return GraphStats(
        host_count=graph.host_count,
        flow_count=graph.flow_count,
        edge_count=graph.edge_count,
        max_host_degree=int(degrees.max()) if degrees.size else 0,
        component_count=int(components),
    )


def graph_to_dict(graph, window_id=None):
    """Plain-JSON view of a graph: node lists, typed edges, canonical order."""
    return {
        "window_id": window_id,
        "hosts": list(graph.hosts),
        "flows": [
            {
                "node": graph.flow_node_id(i),
                "label": int(graph.flow_labels[i]),
                "features": [float(v) for v in graph.flow_features[i]],
            }
            for i in range(graph.flow_count)
        ],
        "edges": [
            [int(a), int(b), EdgeType(int(t)).name]
            for (a, b), t in zip(graph.edge_index, graph.edge_types)
        ],
    }


def write_graph_dump(samples, path):
    """One JSON object per line, one line per graph sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for sample in samples:
            f.write(json.dumps(graph_to_dict(sample.graph, sample.window_id)))
            f.write("\n")
    return path
