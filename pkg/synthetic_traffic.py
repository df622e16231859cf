"""
Synthetic labeled flows whose host/flow topology reproduces well-known
multi-flow attacks (DDoS star, port scan, network scan, brute force) mixed
into benign background traffic.

Every record carries internally consistent aggregate features (totals,
means, rates and duration agree with each other), so the adversarial
perturbations operate on the generated data exactly as on real records.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from errors import SpecError
from flow_ingest import (
    BENIGN_LABEL, BWD_BYTES, BWD_PACKETS, DEFAULT_FEATURE_COLUMNS, DURATION,
    FWD_BYTES, FWD_PACKETS, RawFlowRecord,
)
from utils import child_seeds

logger = logging.getLogger(__name__)

TCP = 6
WINDOW_SPAN_SECONDS = 60.0
LENGTH_SPREAD = 1.5  # max/min packet length sit this many stds from the mean


class PatternKind(str, Enum):
    DDOS = "DDoS"
    PORT_SCAN = "PortScan"
    NETWORK_SCAN = "NetworkScan"
    BRUTE_FORCE = "BruteForce"
    BENIGN = "Benign"

    @property
    def label(self):
        return BENIGN_LABEL if self is PatternKind.BENIGN else self.value


@dataclass(frozen=True)
class Distribution:
    """One sampling distribution of a flow primitive."""

    mean: float
    spread: float = 0.0
    family: str = "normal"
    minimum: float = 0.0

    def sample(self, rng, size=None):
        if self.family == "normal":
            values = rng.normal(self.mean, self.spread, size)
        elif self.family == "lognormal":
            # mean is the median of the heavy-tailed distribution
            values = self.mean * np.exp(rng.normal(0.0, self.spread, size))
        elif self.family == "uniform":
            values = rng.uniform(self.mean - self.spread, self.mean + self.spread, size)
        elif self.family == "constant":
            values = np.full(size, self.mean) if size is not None else self.mean
        else:
            raise SpecError(f"Unknown distribution family '{self.family}'")
        return np.maximum(values, self.minimum)


PRIMITIVES = (
    "fwd_packets", "bwd_packets", "fwd_length", "bwd_length", "length_jitter",
    "iat", "iat_jitter", "fin", "syn", "rst", "psh", "ack", "urg",
)


def _profile(**dists):
    missing = [name for name in PRIMITIVES if name not in dists]
    if missing:
        raise SpecError(f"Feature profile is missing primitives: {missing}")
    return dists


# Attack flows carry smaller packets and shorter gaps than benign ones;
# packet and flag counts overlap so that lengths and timing are the
# flow-level cues a per-flow classifier latches onto.
DEFAULT_PROFILES = {
    PatternKind.BENIGN: _profile(
        fwd_packets=Distribution(6, 0.8, "lognormal", 1),
        bwd_packets=Distribution(6, 0.8, "lognormal", 1),
        fwd_length=Distribution(320, 0.6, "lognormal"),
        bwd_length=Distribution(560, 0.7, "lognormal"),
        length_jitter=Distribution(60, 0.9, "lognormal"),
        iat=Distribution(4.0e5, 1.0, "lognormal"),
        iat_jitter=Distribution(1.5e5, 1.0, "lognormal"),
        fin=Distribution(1, 0.4),
        syn=Distribution(1, 0.4),
        rst=Distribution(0, 0.4),
        psh=Distribution(2, 0.8, "lognormal"),
        ack=Distribution(6, 0.8, "lognormal"),
        urg=Distribution(0, family="constant"),
    ),
    PatternKind.DDOS: _profile(
        fwd_packets=Distribution(4, 1.0, minimum=1),
        bwd_packets=Distribution(3, 1.0, minimum=1),
        fwd_length=Distribution(40, 8),
        bwd_length=Distribution(60, 10),
        length_jitter=Distribution(12, 4),
        iat=Distribution(3000, 800, minimum=50),
        iat_jitter=Distribution(1500, 400),
        fin=Distribution(1, 0.3),
        syn=Distribution(1, 0.2),
        rst=Distribution(0, 0.3),
        psh=Distribution(1, 0.5),
        ack=Distribution(4, 1.0),
        urg=Distribution(0, family="constant"),
    ),
    PatternKind.PORT_SCAN: _profile(
        fwd_packets=Distribution(1, 0.5, minimum=1),
        bwd_packets=Distribution(1, 0.3, minimum=1),
        fwd_length=Distribution(2, 1.5),
        bwd_length=Distribution(4, 2),
        length_jitter=Distribution(1, 0.5),
        iat=Distribution(500, 150, minimum=10),
        iat_jitter=Distribution(100, 40),
        fin=Distribution(0, 0.2),
        syn=Distribution(1, 0.1),
        rst=Distribution(1, 0.2),
        psh=Distribution(0, 0.2),
        ack=Distribution(1, 0.3),
        urg=Distribution(0, family="constant"),
    ),
    PatternKind.NETWORK_SCAN: _profile(
        fwd_packets=Distribution(2, 0.5, minimum=1),
        bwd_packets=Distribution(1, 0.4, minimum=1),
        fwd_length=Distribution(8, 3),
        bwd_length=Distribution(6, 3),
        length_jitter=Distribution(2, 1),
        iat=Distribution(1200, 300, minimum=10),
        iat_jitter=Distribution(300, 100),
        fin=Distribution(0, 0.2),
        syn=Distribution(1, 0.2),
        rst=Distribution(1, 0.3),
        psh=Distribution(0, 0.2),
        ack=Distribution(1, 0.4),
        urg=Distribution(0, family="constant"),
    ),
    PatternKind.BRUTE_FORCE: _profile(
        fwd_packets=Distribution(12, 2, minimum=1),
        bwd_packets=Distribution(14, 2, minimum=1),
        fwd_length=Distribution(70, 10),
        bwd_length=Distribution(90, 15),
        length_jitter=Distribution(20, 5),
        iat=Distribution(2.0e4, 5.0e3, minimum=100),
        iat_jitter=Distribution(8.0e3, 2.0e3),
        fin=Distribution(1, 0.3),
        syn=Distribution(1, 0.2),
        rst=Distribution(0, 0.3),
        psh=Distribution(5, 1.5),
        ack=Distribution(12, 2),
        urg=Distribution(0, family="constant"),
    ),
}

SERVICE_PORTS = (80, 443, 53, 22, 25, 8080, 3389)
ATTACK_PORTS = {
    PatternKind.DDOS: 80,
    PatternKind.NETWORK_SCAN: 445,
    PatternKind.BRUTE_FORCE: 22,
}


@dataclass(frozen=True)
class PatternSpec:
    """Topology and feature profile of one generated traffic pattern.

    For Benign, attacker_count is the client pool, victim_count the server
    pool and flows_per_pair the flows each client opens.
    """

    kind: PatternKind
    attacker_count: int = 1
    victim_count: int = 1
    flows_per_pair: int = 1
    feature_profile: dict = field(default=None, hash=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        if self.feature_profile is None:
            object.__setattr__(self, "feature_profile", DEFAULT_PROFILES[self.kind])

    @property
    def pattern_size(self):
        if self.kind is PatternKind.BENIGN:
            return self.attacker_count * self.flows_per_pair
        return self.attacker_count * self.victim_count * self.flows_per_pair

    def validate(self):
        kind = self.kind
        if min(self.attacker_count, self.victim_count, self.flows_per_pair) < 1:
            raise SpecError(f"{kind.value}: attacker, victim and flow counts must be >= 1")
        if kind is PatternKind.DDOS:
            if self.attacker_count <= 1 or self.victim_count != 1:
                raise SpecError("DDoS requires more than one attacker and exactly one victim")
        elif kind is PatternKind.PORT_SCAN:
            if self.attacker_count != 1 or self.victim_count != 1 or self.flows_per_pair <= 1:
                raise SpecError("PortScan requires one attacker, one victim and several flows")
            if self.flows_per_pair > 65535:
                raise SpecError("PortScan cannot probe more than 65535 distinct ports")
        elif kind is PatternKind.NETWORK_SCAN:
            if self.attacker_count != 1 or self.victim_count <= 1:
                raise SpecError("NetworkScan requires one attacker and several victims")
        elif kind is PatternKind.BRUTE_FORCE:
            if self.attacker_count != 1 or self.victim_count != 1 or self.flows_per_pair <= 1:
                raise SpecError("BruteForce requires one attacker, one victim and repeated flows")
        _profile(**self.feature_profile)


class AddressPool:
    """Hands out IPv4 addresses that are unique within one window."""

    def __init__(self, rng):
        self.rng = rng
        self.used = set()

    def take(self, count=1):
        addresses = []
        while len(addresses) < count:
            value = int(self.rng.integers(1, 2**24 - 1))
            if value in self.used:
                continue
            self.used.add(value)
            addresses.append(f"10.{(value >> 16) & 255}.{(value >> 8) & 255}.{value & 255}")
        return addresses


def _flow_features(profile, rng):
    """Sample flow primitives and derive every aggregate column consistently."""
    draw = {name: float(dist.sample(rng)) for name, dist in profile.items()}
    fwd_n = max(1, int(round(draw["fwd_packets"])))
    bwd_n = max(0, int(round(draw["bwd_packets"])))
    packets = fwd_n + bwd_n
    jitter = draw["length_jitter"]

    def direction(count, mean_length):
        if count == 0:
            return 0.0, 0.0, 0.0, 0.0
        std = jitter if count > 1 else 0.0
        return (
            mean_length + LENGTH_SPREAD * std,
            max(0.0, mean_length - LENGTH_SPREAD * std),
            mean_length,
            std,
        )

    f_max, f_min, f_mean, f_std = direction(fwd_n, draw["fwd_length"])
    b_max, b_min, b_mean, b_std = direction(bwd_n, draw["bwd_length"])
    fwd_bytes = fwd_n * f_mean
    bwd_bytes = bwd_n * b_mean

    iat = draw["iat"] if packets > 1 else 0.0
    iat_std = draw["iat_jitter"] if packets > 2 else 0.0
    duration = iat * (packets - 1)

    def gaps(count):
        if count < 2:
            return 0.0, 0.0, 0.0
        mean_gap = duration / (count - 1)
        return mean_gap * (count - 1), mean_gap, iat_std

    fwd_total, fwd_iat, fwd_iat_std = gaps(fwd_n)
    bwd_total, bwd_iat, bwd_iat_std = gaps(bwd_n)

    seconds = duration / 1e6
    if seconds > 0:
        byte_rate = (fwd_bytes + bwd_bytes) / seconds
        packet_rate = packets / seconds
        fwd_rate = fwd_n / seconds
        bwd_rate = bwd_n / seconds
    else:
        byte_rate = packet_rate = fwd_rate = bwd_rate = 0.0

    mean_length = (fwd_bytes + bwd_bytes) / packets
    second_moment = (
        fwd_n * (f_std ** 2 + f_mean ** 2) + bwd_n * (b_std ** 2 + b_mean ** 2)
    ) / packets
    length_std = float(np.sqrt(max(0.0, second_moment - mean_length ** 2)))

    def flag(name):
        return float(min(packets, max(0, int(round(draw[name])))))

    values = {
        DURATION: duration,
        FWD_PACKETS: float(fwd_n),
        BWD_PACKETS: float(bwd_n),
        FWD_BYTES: fwd_bytes,
        BWD_BYTES: bwd_bytes,
        "Fwd Packet Length Max": f_max,
        "Fwd Packet Length Min": f_min,
        "Fwd Packet Length Mean": f_mean,
        "Fwd Packet Length Std": f_std,
        "Bwd Packet Length Max": b_max,
        "Bwd Packet Length Min": b_min,
        "Bwd Packet Length Mean": b_mean,
        "Bwd Packet Length Std": b_std,
        "Flow Bytes/s": byte_rate,
        "Flow Packets/s": packet_rate,
        "Flow IAT Mean": iat,
        "Flow IAT Std": iat_std,
        "Flow IAT Max": iat + LENGTH_SPREAD * iat_std if packets > 1 else 0.0,
        "Flow IAT Min": max(0.0, iat - LENGTH_SPREAD * iat_std) if packets > 1 else 0.0,
        "Fwd IAT Total": fwd_total,
        "Fwd IAT Mean": fwd_iat,
        "Fwd IAT Std": fwd_iat_std,
        "Bwd IAT Total": bwd_total,
        "Bwd IAT Mean": bwd_iat,
        "Bwd IAT Std": bwd_iat_std,
        "Fwd Packets/s": fwd_rate,
        "Bwd Packets/s": bwd_rate,
        "Packet Length Mean": mean_length,
        "Packet Length Std": length_std,
        "Average Packet Size": mean_length,
        "FIN Flag Count": flag("fin"),
        "SYN Flag Count": flag("syn"),
        "RST Flag Count": flag("rst"),
        "PSH Flag Count": flag("psh"),
        "ACK Flag Count": flag("ack"),
        "URG Flag Count": flag("urg"),
    }
    duration = values.pop(DURATION)
    return duration, {name: values[name] for name in DEFAULT_FEATURE_COLUMNS if name != DURATION}


def _record(src, dst, src_port, dst_port, timestamp, profile, label, rng):
    duration, features = _flow_features(profile, rng)
    return RawFlowRecord(
        src_ip=src, dst_ip=dst, src_port=int(src_port), dst_port=int(dst_port),
        protocol=TCP, timestamp=float(timestamp), duration=duration,
        features=features, label=label,
    )


def _ephemeral_ports(rng, size):
    return rng.integers(49152, 65536, size=size)


def _times(rng, count, start_time, span):
    return np.sort(rng.uniform(start_time, start_time + span, size=count))


def generate_pattern(spec, rng, addresses=None, start_time=0.0, span=WINDOW_SPAN_SECONDS):
    """
    Generate the flows of one pattern instance.

    Args:
        spec: PatternSpec, validated before use
        rng: numpy Generator
        addresses: AddressPool shared by the window; a private pool when None
        start_time: Earliest timestamp in seconds
        span: Timestamps fall in [start_time, start_time + span)

    Returns:
        List of RawFlowRecord labeled with the spec's kind

    Raises:
        SpecError: the spec violates its kind's invariants
    """
    spec.validate()
    pool = addresses if addresses is not None else AddressPool(rng)
    profile = spec.feature_profile
    label = spec.kind.label
    kind = spec.kind

    if kind is PatternKind.BENIGN:
        return benign_flows(spec, spec.pattern_size, rng, pool, start_time, span)

    attackers = pool.take(spec.attacker_count)
    victims = pool.take(spec.victim_count)
    times = _times(rng, spec.pattern_size, start_time, span)
    src_ports = _ephemeral_ports(rng, spec.pattern_size)

    pairs = [(a, v) for a in attackers for v in victims for _ in range(spec.flows_per_pair)]
    if kind is PatternKind.PORT_SCAN:
        dst_ports = rng.choice(65535, size=spec.pattern_size, replace=False) + 1
    else:
        dst_ports = np.full(spec.pattern_size, ATTACK_PORTS[kind])

    return [
        _record(src, dst, src_ports[i], dst_ports[i], times[i], profile, label, rng)
        for i, (src, dst) in enumerate(pairs)
    ]


def benign_flows(spec, count, rng, addresses, start_time=0.0, span=WINDOW_SPAN_SECONDS):
    """Background traffic: `count` flows between random client/server pairs."""
    clients = addresses.take(spec.attacker_count)
    servers = addresses.take(spec.victim_count)
    client_idx = rng.integers(0, len(clients), size=count)
    server_idx = rng.integers(0, len(servers), size=count)
    ports = rng.choice(SERVICE_PORTS, size=count)
    src_ports = _ephemeral_ports(rng, count)
    times = _times(rng, count, start_time, span)
    return [
        _record(clients[c], servers[s], src_ports[i], ports[i], times[i],
                spec.feature_profile, BENIGN_LABEL, rng)
        for i, (c, s) in enumerate(zip(client_idx, server_idx))
    ]


@dataclass
class SyntheticDataset:
    windows: list
    inventories: list

    @property
    def records(self):
        return [record for window in self.windows for record in window]


def _split_counts(total, weights):
    """Largest-remainder split of `total` proportional to `weights`."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:remainder]:
        counts[i] += 1
    return counts.tolist()


def generate_dataset(mix, window_count, flows_per_window, rng):
    """
    Generate windows of benign background traffic with embedded attacks.

    Each attack spec appears in a window with probability equal to its weight
    (capped at 1) while it still fits; benign specs fill the rest of the
    window, split in proportion to their weights.

    Args:
        mix: List of (PatternSpec, weight)
        window_count: Number of windows
        flows_per_window: Flows in every window
        rng: numpy Generator; the output is a pure function of its state

    Returns:
        SyntheticDataset with timestamp-ordered windows and per-window label counts
    """
    if not mix:
        raise SpecError("Pattern mix is empty")
    for spec, weight in mix:
        spec.validate()
        if weight <= 0:
            raise SpecError(f"Weight of {spec.kind.value} must be positive, got {weight}")
    benign = [(spec, weight) for spec, weight in mix if spec.kind is PatternKind.BENIGN]
    attacks = [(spec, weight) for spec, weight in mix if spec.kind is not PatternKind.BENIGN]
    if not benign:
        raise SpecError("Pattern mix needs at least one Benign spec")
    if attacks:
        smallest = min(spec.pattern_size for spec, _ in attacks)
        if flows_per_window < smallest:
            raise SpecError(
                f"flows_per_window={flows_per_window} is smaller than the smallest pattern ({smallest} flows)"
            )

    windows = []
    inventories = []
    for window_id, seed in enumerate(child_seeds(rng, window_count)):
        wrng = np.random.default_rng(seed)
        pool = AddressPool(wrng)
        start = window_id * WINDOW_SPAN_SECONDS
        flows = []
        for spec, weight in attacks:
            if wrng.random() < min(1.0, weight) and len(flows) + spec.pattern_size <= flows_per_window:
                flows.extend(generate_pattern(spec, wrng, pool, start))
        remaining = flows_per_window - len(flows)
        counts = _split_counts(remaining, [weight for _, weight in benign])
        for (spec, _), count in zip(benign, counts):
            if count:
                flows.extend(benign_flows(spec, count, wrng, pool, start))
        flows.sort(key=lambda r: r.timestamp)
        windows.append(flows)
        inventories.append(Counter(r.label for r in flows))

    logger.info(
        "Generated %d windows (%d flows); attack windows: %s",
        window_count, window_count * flows_per_window,
        dict(Counter(label for inv in inventories for label in inv if label != BENIGN_LABEL)),
    )
    return SyntheticDataset(windows, inventories)


def default_mix():
    """Desk-scale mix: benign background plus four attack patterns."""
    return [
        (PatternSpec(PatternKind.BENIGN, attacker_count=60, victim_count=15, flows_per_pair=1), 1.0),
        (PatternSpec(PatternKind.DDOS, attacker_count=40, victim_count=1, flows_per_pair=1), 0.25),
        (PatternSpec(PatternKind.PORT_SCAN, attacker_count=1, victim_count=1, flows_per_pair=40), 0.25),
        (PatternSpec(PatternKind.NETWORK_SCAN, attacker_count=1, victim_count=30, flows_per_pair=1), 0.25),
        (PatternSpec(PatternKind.BRUTE_FORCE, attacker_count=1, victim_count=1, flows_per_pair=30), 0.25),
    ]
