import numpy as np
import pandas as pd
import pytest

from adversarial import (
    MODES,
    RAW_SHIFT,
    PerturbationKind,
    PerturbationSpec,
    SWEEP_LIMITS,
    apply_perturbation,
    max_drop,
    perturb_iat,
    perturb_packet_size,
    robustness_sweep,
    sweep_grid,
    validate_grid,
    write_curves_csv,
)
from baselines import Id3Config, new_mlp, train_baseline
from errors import NotFittedError, SpecError
from flow_ingest import BWD_BYTES, BWD_PACKETS, FWD_BYTES, FWD_PACKETS, SYNTHETIC_CLASS_TABLE, default_schema
from gnn_model import GnnConfig, new_model, resolve_flow_columns
from graph_builder import build_graph
from synthetic_traffic import PatternKind, PatternSpec, default_mix, generate_dataset
from training_eval import evaluate, prepare_split, stack_flows

BYTE_RATE = "Flow Bytes/s"


@pytest.fixture
def attack_flow(make_record):
    return make_record(label="DDoS", duration=2e6, features={
        FWD_PACKETS: 10.0, BWD_PACKETS: 0.0, FWD_BYTES: 1000.0, BWD_BYTES: 0.0,
        "Fwd Packet Length Mean": 100.0, BYTE_RATE: 500.0,
    })


@pytest.fixture
def chatty_flow(make_record):
    return make_record(label="PortScan", duration=1e6, features={
        FWD_PACKETS: 6.0, BWD_PACKETS: 5.0, FWD_BYTES: 600.0, BWD_BYTES: 400.0, BYTE_RATE: 1000.0,
        "Flow Packets/s": 11.0, "Flow IAT Mean": 1e5, "Fwd IAT Total": 8e5, "Flow IAT Std": 7.0,
    })


def test_packet_size_arithmetic(attack_flow):
    (out,) = perturb_packet_size([attack_flow], 50.0)
    assert out.features["Fwd Packet Length Mean"] == 150.0
    assert out.features[FWD_BYTES] == 1500.0
    assert out.features[BYTE_RATE] - attack_flow.features[BYTE_RATE] == pytest.approx(250.0)
    # no backward packets, so backward lengths stay put
    assert out.features["Bwd Packet Length Mean"] == attack_flow.features["Bwd Packet Length Mean"]
    assert out.features["Fwd Packet Length Std"] == attack_flow.features["Fwd Packet Length Std"]
    assert out.duration == attack_flow.duration


def test_iat_arithmetic(chatty_flow):
    (out,) = perturb_iat([chatty_flow], 0.5)
    assert out.duration == pytest.approx(6e6)
    assert out.features[BYTE_RATE] == pytest.approx(1000.0 / 6.0)
    assert out.features["Flow Packets/s"] == pytest.approx(11.0 / 6.0)
    assert out.features["Flow IAT Mean"] == pytest.approx(6e5)
    assert out.features["Fwd IAT Total"] == pytest.approx(8e5 + 5 * 5e5)
    assert out.features["Flow IAT Std"] == 7.0


def test_single_packet_flow_is_left_alone(make_record):
    flow = make_record(label="DDoS", features={FWD_PACKETS: 1.0, BWD_PACKETS: 0.0})
    assert perturb_iat([flow], 1.5) == [flow]


def test_benign_and_zero_delta_are_identity(make_record, attack_flow):
    benign = make_record(label="BENIGN")
    assert perturb_packet_size([benign], 200.0) == [benign]
    assert perturb_iat([benign], 2.0) == [benign]
    assert perturb_packet_size([attack_flow], 0.0) == [attack_flow]
    assert perturb_iat([attack_flow], 0.0) == [attack_flow]


def test_raw_shift_leaves_rates(attack_flow, chatty_flow):
    (sized,) = perturb_packet_size([attack_flow], 50.0, RAW_SHIFT)
    (stretched,) = perturb_iat([chatty_flow], 0.5, RAW_SHIFT)
    assert sized.features[BYTE_RATE] == attack_flow.features[BYTE_RATE]
    assert stretched.features[BYTE_RATE] == chatty_flow.features[BYTE_RATE]
    assert stretched.duration == pytest.approx(6e6)


def test_consistent_perturbations_compose(attack_flow, chatty_flow):
    flows = [attack_flow, chatty_flow]
    for perturb, a, b in ((perturb_packet_size, 30.0, 70.0), (perturb_iat, 0.25, 1.0)):
        twice = perturb(perturb(flows, a), b)
        once = perturb(flows, a + b)
        for left, right in zip(twice, once):
            assert left.duration == pytest.approx(right.duration, rel=1e-12)
            for name, value in right.features.items():
                assert left.features[name] == pytest.approx(value, rel=1e-9)


def test_perturbation_keeps_topology():
    mix = [
        (PatternSpec(PatternKind.BENIGN, attacker_count=5, victim_count=3), 1.0),
        (PatternSpec(PatternKind.DDOS, attacker_count=3, victim_count=1), 0.5),
        (PatternSpec(PatternKind.PORT_SCAN, flows_per_pair=3), 0.5),
        (PatternSpec(PatternKind.NETWORK_SCAN, victim_count=3), 0.5),
        (PatternSpec(PatternKind.BRUTE_FORCE, flows_per_pair=3), 0.5),
    ]
    rng = np.random.default_rng(17)
    kinds = list(PerturbationKind)
    for window in generate_dataset(mix, 500, 20, rng).windows:
        kind = kinds[rng.integers(len(kinds))]
        spec = PerturbationSpec(kind, rng.uniform(0.0, SWEEP_LIMITS[kind]), MODES[rng.integers(len(MODES))])
        perturbed_window = apply_perturbation(window, spec)
        base = build_graph(window)
        perturbed = build_graph(perturbed_window)
        assert perturbed.hosts == base.hosts
        np.testing.assert_array_equal(perturbed.edge_index, base.edge_index)
        np.testing.assert_array_equal(perturbed.edge_types, base.edge_types)
        assert [r.label for r in perturbed_window] == [r.label for r in window]


def test_negative_magnitude_is_rejected(attack_flow):
    with pytest.raises(SpecError):
        perturb_packet_size([attack_flow], -1.0)
    with pytest.raises(SpecError):
        PerturbationSpec(PerturbationKind.INTER_ARRIVAL, 0.5, "sideways").validate()


def test_grid_validation():
    validate_grid(sweep_grid())
    with pytest.raises(SpecError):
        validate_grid([])
    with pytest.raises(SpecError):
        validate_grid([PerturbationSpec(PerturbationKind.PACKET_SIZE, m) for m in (0.0, 100.0, 50.0)])
    with pytest.raises(SpecError):
        validate_grid([PerturbationSpec(PerturbationKind.PACKET_SIZE, 50.0)])
    with pytest.raises(SpecError):
        validate_grid(sweep_grid(packet_sizes=(0, 250)))


@pytest.fixture(scope="module")
def sweep_setup():
    windows = generate_dataset(default_mix(), 5, 60, np.random.default_rng(31)).windows
    schema = default_schema([FWD_PACKETS, BWD_PACKETS, BYTE_RATE, "Flow IAT Mean", "Fwd Packet Length Mean"])
    encoder, train_samples, val_samples = prepare_split(windows[:3], windows[3:], schema, SYNTHETIC_CLASS_TABLE)
    features, labels = stack_flows(train_samples)
    tree, _ = train_baseline("id3", features, labels, encoder.class_count, Id3Config(max_depth=6),
                             np.random.default_rng(0), SYNTHETIC_CLASS_TABLE.class_names)
    return encoder, windows[3:], val_samples, tree


def test_zero_magnitude_point_matches_plain_evaluation(sweep_setup):
    encoder, val_windows, val_samples, tree = sweep_setup
    grid = sweep_grid(packet_sizes=(0, 100), iat_seconds=(0, 1))
    points = robustness_sweep([("id3", tree)], val_windows, grid, encoder, progress=False)
    assert len(points) == 4
    plain = evaluate(tree, val_samples).metrics.weighted_f1
    for kind in PerturbationKind:
        (zero,) = [p for p in points if p.kind == kind and p.magnitude == 0]
        assert zero.weighted_f1 == plain
        assert max_drop(points, "id3", kind) >= 0.0


def test_sweep_refuses_untrained_model(sweep_setup):
    encoder, val_windows, _, _ = sweep_setup
    untrained = new_mlp(encoder.feature_count, encoder.class_count, (4, 4), np.random.default_rng(0))
    with pytest.raises(NotFittedError):
        robustness_sweep([("mlp", untrained)], val_windows, sweep_grid(), encoder, progress=False)


@pytest.fixture
def count_seeded_gnn(sweep_setup):
    encoder = sweep_setup[0]
    config = GnnConfig(encoder.feature_count, encoder.class_count, hidden_dim=4, iterations=2, message_hidden=4,
                       readout_hidden=(4, 4),
                       flow_columns=resolve_flow_columns(encoder.feature_names, (FWD_PACKETS, BWD_PACKETS)))
    model = new_model(config, SYNTHETIC_CLASS_TABLE.class_names, np.random.default_rng(3))
    model.fitted = True
    return model


def test_count_seeded_gnn_ignores_perturbations(sweep_setup, count_seeded_gnn, attack_flow, chatty_flow, make_record):
    encoder, val_windows, _, _ = sweep_setup
    crafted = [attack_flow, chatty_flow, make_record("10.0.0.3", "10.0.0.2")]
    for window in [crafted] + list(val_windows):
        original = build_graph(window, encoder)
        base = count_seeded_gnn.logits(original)
        for kind in PerturbationKind:
            for mode in MODES:
                spec = PerturbationSpec(kind, SWEEP_LIMITS[kind], mode)
                perturbed = build_graph(apply_perturbation(window, spec), encoder)
                if window is crafted:
                    assert not np.array_equal(perturbed.flow_features, original.flow_features)
                np.testing.assert_array_equal(count_seeded_gnn.logits(perturbed), base)


def test_count_seeded_gnn_curve_is_flat(sweep_setup, count_seeded_gnn):
    encoder, val_windows, _, _ = sweep_setup
    points = robustness_sweep([("gnn", count_seeded_gnn)], val_windows, sweep_grid(), encoder, progress=False)
    assert len({p.weighted_f1 for p in points}) == 1
    for kind in PerturbationKind:
        assert max_drop(points, "gnn", kind) == 0.0


def test_curves_csv_layout(tmp_path, sweep_setup):
    encoder, val_windows, _, tree = sweep_setup
    points = robustness_sweep([("id3", tree)], val_windows, sweep_grid((0, 50), (0,)), encoder, progress=False)
    names = SYNTHETIC_CLASS_TABLE.class_names
    frame = pd.read_csv(write_curves_csv(points, tmp_path / "curves.csv", names))
    assert frame.columns.tolist()[:4] == ["model", "perturbation_kind", "magnitude", "weighted_f1"]
    assert frame.columns.tolist()[4:] == [f"f1_{n}" for n in names]
    assert frame["perturbation_kind"].tolist() == ["PacketSize", "PacketSize", "InterArrival"]
