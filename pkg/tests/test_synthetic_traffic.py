import math

import numpy as np
import pytest

from errors import SpecError
from flow_ingest import BENIGN_LABEL, BWD_PACKETS, FWD_BYTES, FWD_PACKETS, clean_records
from synthetic_traffic import (
    ATTACK_PORTS,
    AddressPool,
    PatternKind,
    PatternSpec,
    default_mix,
    generate_dataset,
    generate_pattern,
)


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("spec", [
    PatternSpec(PatternKind.DDOS, attacker_count=1, victim_count=1),
    PatternSpec(PatternKind.DDOS, attacker_count=5, victim_count=2),
    PatternSpec(PatternKind.PORT_SCAN, attacker_count=1, victim_count=1, flows_per_pair=1),
    PatternSpec(PatternKind.NETWORK_SCAN, attacker_count=1, victim_count=1),
    PatternSpec(PatternKind.BRUTE_FORCE, attacker_count=2, victim_count=1, flows_per_pair=5),
    PatternSpec(PatternKind.BENIGN, attacker_count=0, victim_count=3),
])
def test_invalid_specs_are_rejected(spec):
    with pytest.raises(SpecError):
        generate_pattern(spec, rng())


def test_ddos_topology():
    flows = generate_pattern(PatternSpec(PatternKind.DDOS, attacker_count=5, victim_count=1), rng())
    assert len(flows) == 5
    assert len({f.src_ip for f in flows}) == 5
    assert len({f.dst_ip for f in flows}) == 1
    assert {f.dst_port for f in flows} == {ATTACK_PORTS[PatternKind.DDOS]}
    assert {f.label for f in flows} == {"DDoS"}


def test_port_scan_probes_distinct_ports():
    spec = PatternSpec(PatternKind.PORT_SCAN, attacker_count=1, victim_count=1, flows_per_pair=40)
    flows = generate_pattern(spec, rng(1))
    assert len(flows) == 40
    assert len({f.dst_port for f in flows}) == 40
    assert all(1 <= f.dst_port <= 65535 for f in flows)
    assert len({(f.src_ip, f.dst_ip) for f in flows}) == 1


def test_network_scan_reaches_every_victim():
    flows = generate_pattern(PatternSpec(PatternKind.NETWORK_SCAN, attacker_count=1, victim_count=30), rng(2))
    assert len({f.dst_ip for f in flows}) == 30
    assert len({f.src_ip for f in flows}) == 1


def test_brute_force_repeats_one_pair():
    spec = PatternSpec(PatternKind.BRUTE_FORCE, attacker_count=1, victim_count=1, flows_per_pair=30)
    flows = generate_pattern(spec, rng(3))
    assert len(flows) == spec.pattern_size == 30
    assert len({(f.src_ip, f.dst_ip, f.dst_port) for f in flows}) == 1


def test_generated_features_are_consistent():
    spec = PatternSpec(PatternKind.BRUTE_FORCE, attacker_count=1, victim_count=1, flows_per_pair=20)
    for flow in generate_pattern(spec, rng(4)):
        features = flow.features
        packets = features[FWD_PACKETS] + features[BWD_PACKETS]
        assert features[FWD_PACKETS] >= 1
        assert flow.duration >= 0
        assert features[FWD_BYTES] == pytest.approx(features[FWD_PACKETS] * features["Fwd Packet Length Mean"])
        assert all(math.isfinite(v) for v in features.values())
        if flow.duration > 0:
            assert features["Flow Packets/s"] == pytest.approx(packets / (flow.duration / 1e6))


def test_generated_flows_survive_cleaning(small_dataset):
    records = small_dataset.records
    cleaned, report = clean_records(records)
    assert len(cleaned) == len(records)
    assert report.dropped == 0 and report.replaced_total == 0


def test_address_pool_never_repeats():
    pool = AddressPool(rng(5))
    addresses = pool.take(500)
    assert len(set(addresses)) == 500
    assert not set(addresses) & set(pool.take(100))


def test_dataset_shape_and_order(small_dataset):
    assert len(small_dataset.windows) == 8
    for window, inventory in zip(small_dataset.windows, small_dataset.inventories):
        assert len(window) == 200
        times = [f.timestamp for f in window]
        assert times == sorted(times)
        assert sum(inventory.values()) == 200
        assert inventory[BENIGN_LABEL] > 0


def test_dataset_is_pure_function_of_seed():
    first = generate_dataset(default_mix(), 3, 120, rng(9))
    second = generate_dataset(default_mix(), 3, 120, rng(9))
    other = generate_dataset(default_mix(), 3, 120, rng(10))
    assert first.windows == second.windows
    assert first.windows != other.windows


def test_dataset_attacks_appear_when_weight_is_one():
    mix = [
        (PatternSpec(PatternKind.BENIGN, attacker_count=10, victim_count=5), 1.0),
        (PatternSpec(PatternKind.DDOS, attacker_count=20, victim_count=1), 1.0),
    ]
    dataset = generate_dataset(mix, 4, 50, rng(6))
    for inventory in dataset.inventories:
        assert inventory["DDoS"] == 20
        assert inventory[BENIGN_LABEL] == 30


def test_dataset_rejects_windows_smaller_than_every_pattern():
    mix = [
        (PatternSpec(PatternKind.BENIGN, attacker_count=10, victim_count=5), 1.0),
        (PatternSpec(PatternKind.DDOS, attacker_count=20, victim_count=1), 0.5),
    ]
    with pytest.raises(SpecError):
        generate_dataset(mix, 1, 10, rng())


def test_dataset_rejects_mix_without_benign():
    mix = [(PatternSpec(PatternKind.DDOS, attacker_count=3, victim_count=1), 1.0)]
    with pytest.raises(SpecError):
        generate_dataset(mix, 1, 10, rng())
