"""
Packet-size and inter-arrival-time evasion perturbations of attack flows,
and sweeps that measure how each trained model's weighted F1 responds.

Perturbations work on RawFlowRecord values before normalization. In
"consistent" mode every arithmetically dependent column (totals, means,
duration, rates) is recomputed so the perturbed record stays internally
consistent; "raw_shift" mode shifts only the primary columns.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from tqdm import tqdm

from errors import NotFittedError, SpecError
from flow_ingest import BWD_BYTES, BWD_PACKETS, FWD_BYTES, FWD_PACKETS
from graph_builder import make_samples
from utils import write_rows_csv

logger = logging.getLogger(__name__)

CONSISTENT = "consistent"
RAW_SHIFT = "raw_shift"
MODES = (CONSISTENT, RAW_SHIFT)

MAX_PACKET_SIZE_DELTA = 200.0
MAX_IAT_DELTA = 2.0
MICROSECONDS = 1e6

# columns shifted per direction by a packet-size delta, when the direction has packets
FWD_LENGTH_COLUMNS = ("Fwd Packet Length Max", "Fwd Packet Length Min", "Fwd Packet Length Mean",
                      "Avg Fwd Segment Size")
BWD_LENGTH_COLUMNS = ("Bwd Packet Length Max", "Bwd Packet Length Min", "Bwd Packet Length Mean",
                      "Avg Bwd Segment Size")
FLOW_LENGTH_COLUMNS = ("Packet Length Mean", "Average Packet Size", "Min Packet Length",
                       "Max Packet Length")

FLOW_IAT_COLUMNS = ("Flow IAT Mean", "Flow IAT Max", "Flow IAT Min")
FWD_IAT_COLUMNS = ("Fwd IAT Mean", "Fwd IAT Max", "Fwd IAT Min")
BWD_IAT_COLUMNS = ("Bwd IAT Mean", "Bwd IAT Max", "Bwd IAT Min")

BYTE_RATE = "Flow Bytes/s"
PACKET_RATE = "Flow Packets/s"
FWD_RATE = "Fwd Packets/s"
BWD_RATE = "Bwd Packets/s"


class PerturbationKind(str, Enum):
    PACKET_SIZE = "PacketSize"
    INTER_ARRIVAL = "InterArrival"


SWEEP_LIMITS = {
    PerturbationKind.PACKET_SIZE: MAX_PACKET_SIZE_DELTA,
    PerturbationKind.INTER_ARRIVAL: MAX_IAT_DELTA,
}


@dataclass(frozen=True)
class PerturbationSpec:
    """Magnitude is bytes for PacketSize and seconds for InterArrival."""

    kind: PerturbationKind
    magnitude: float
    mode: str = CONSISTENT

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))

    def validate(self, sweep=False):
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise SpecError(f"Perturbation magnitude must be >= 0, got {self.magnitude}")
        if self.mode not in MODES:
            raise SpecError(f"Unknown perturbation mode '{self.mode}', expected one of {list(MODES)}")
        limit = SWEEP_LIMITS[self.kind]
        if sweep and self.magnitude > limit:
            raise SpecError(f"{self.kind.value} sweep magnitude {self.magnitude} exceeds {limit}")
        return self


def _shift(features, names, delta):
    for name in names:
        if name in features:
            features[name] = features[name] + delta


def _seconds(duration):
    return duration / MICROSECONDS


def _set_rate(features, name, amount, seconds):
    if name in features and seconds > 0:
        features[name] = amount / seconds


def perturb_packet_size(records, delta, mode=CONSISTENT):
    """
    Grow every packet of each attack flow by `delta` bytes.

    Length min/max/mean columns shift by delta for directions that carry
    packets, byte totals grow by delta per packet, length stddevs stay put
    and, in consistent mode, the byte rate is recomputed from the new totals.
    Benign records are returned unchanged.
    """
    PerturbationSpec(PerturbationKind.PACKET_SIZE, delta, mode).validate()
    out = []
    for record in records:
        if delta == 0 or record.is_benign:
            out.append(record)
            continue
        features = dict(record.features)
        fwd_n = features.get(FWD_PACKETS, 0.0)
        bwd_n = features.get(BWD_PACKETS, 0.0)
        if fwd_n > 0:
            _shift(features, FWD_LENGTH_COLUMNS, delta)
            _shift(features, (FWD_BYTES,), delta * fwd_n)
        if bwd_n > 0:
            _shift(features, BWD_LENGTH_COLUMNS, delta)
            _shift(features, (BWD_BYTES,), delta * bwd_n)
        if fwd_n + bwd_n > 0:
            _shift(features, FLOW_LENGTH_COLUMNS, delta)
        if mode == CONSISTENT:
            total_bytes = features.get(FWD_BYTES, 0.0) + features.get(BWD_BYTES, 0.0)
            _set_rate(features, BYTE_RATE, total_bytes, _seconds(record.duration))
        out.append(replace(record, features=features))
    return out


def perturb_iat(records, delta, mode=CONSISTENT):
    """
    Stretch every inter-arrival gap of each attack flow by `delta` seconds.

    With p packets the duration grows by delta * (p - 1); IAT mean/min/max
    shift by delta, per-direction IAT totals grow by delta per gap, IAT
    stddevs stay put and, in consistent mode, every rate is recomputed with
    the new duration. Flows with at most one packet are left unchanged.
    """
    PerturbationSpec(PerturbationKind.INTER_ARRIVAL, delta, mode).validate()
    step = delta * MICROSECONDS
    out = []
    for record in records:
        packets = record.packet_count
        if delta == 0 or record.is_benign or packets <= 1:
            out.append(record)
            continue
        features = dict(record.features)
        duration = record.duration + step * (packets - 1)
        _shift(features, FLOW_IAT_COLUMNS, step)
        for count_column, total_column, columns in (
            (FWD_PACKETS, "Fwd IAT Total", FWD_IAT_COLUMNS),
            (BWD_PACKETS, "Bwd IAT Total", BWD_IAT_COLUMNS),
        ):
            count = features.get(count_column, 0.0)
            if count >= 2:
                _shift(features, columns, step)
                _shift(features, (total_column,), step * (count - 1))
        if mode == CONSISTENT:
            seconds = _seconds(duration)
            fwd_n = features.get(FWD_PACKETS, 0.0)
            bwd_n = features.get(BWD_PACKETS, 0.0)
            _set_rate(features, BYTE_RATE, features.get(FWD_BYTES, 0.0) + features.get(BWD_BYTES, 0.0), seconds)
            _set_rate(features, PACKET_RATE, fwd_n + bwd_n, seconds)
            _set_rate(features, FWD_RATE, fwd_n, seconds)
            _set_rate(features, BWD_RATE, bwd_n, seconds)
        out.append(replace(record, features=features, duration=duration))
    return out


def apply_perturbation(records, spec):
    spec.validate()
    if spec.kind == PerturbationKind.PACKET_SIZE:
        return perturb_packet_size(records, spec.magnitude, spec.mode)
    return perturb_iat(records, spec.magnitude, spec.mode)


def sweep_grid(packet_sizes=(0, 50, 100, 150, 200), iat_seconds=(0, 0.5, 1, 1.5, 2), mode=CONSISTENT):
    """Specs for both perturbation kinds, sorted by magnitude."""
    grid = [PerturbationSpec(PerturbationKind.PACKET_SIZE, float(m), mode) for m in sorted(packet_sizes)]
    grid += [PerturbationSpec(PerturbationKind.INTER_ARRIVAL, float(m), mode) for m in sorted(iat_seconds)]
    return grid


def validate_grid(spec_grid):
    if not spec_grid:
        raise SpecError("Perturbation grid is empty")
    for kind in PerturbationKind:
        magnitudes = [s.validate(sweep=True).magnitude for s in spec_grid if s.kind == kind]
        if not magnitudes:
            continue
        if magnitudes != sorted(magnitudes):
            raise SpecError(f"{kind.value} magnitudes must be sorted ascending, got {magnitudes}")
        if 0 not in magnitudes:
            raise SpecError(f"{kind.value} grid must include magnitude 0")


@dataclass(frozen=True)
class CurvePoint:
    model: str
    kind: PerturbationKind
    magnitude: float
    weighted_f1: float
    class_f1: tuple


def _require_fitted(name, model):
    if not getattr(model, "fitted", False):
        raise NotFittedError(f"Model '{name}' has not been trained")


def robustness_sweep(models, base_windows, spec_grid, encoder, progress=True):
    """
    Evaluate every model on perturbed copies of the validation windows.

    Args:
        models: List of (name, trained model) pairs
        base_windows: Validation flow sets, unperturbed
        spec_grid: PerturbationSpec list, magnitudes sorted per kind, 0 included
        encoder: FlowEncoder carrying the training-time normalization

    Returns:
        List of CurvePoint, grouped by spec then model
    """
    from training_eval import evaluate

    validate_grid(spec_grid)
    for name, model in models:
        _require_fitted(name, model)

    points = []
    for spec in tqdm(spec_grid, desc="sweep", disable=not progress):
        perturbed = [apply_perturbation(window, spec) for window in base_windows]
        samples = make_samples(perturbed, encoder)
        for name, model in models:
            metrics = evaluate(model, samples).metrics
            points.append(CurvePoint(name, spec.kind, spec.magnitude, metrics.weighted_f1, tuple(metrics.f1)))
            logger.info(
                "%s %s %.3g: weighted F1 %.4f", name, spec.kind.value, spec.magnitude, metrics.weighted_f1
            )
    return points


def max_drop(points, model, kind):
    """Largest weighted-F1 loss relative to the magnitude-0 point of one curve."""
    curve = [p for p in points if p.model == model and p.kind == kind]
    base = next(p.weighted_f1 for p in curve if p.magnitude == 0)
    return max(base - p.weighted_f1 for p in curve)


def curve_columns(class_names):
    return ["model", "perturbation_kind", "magnitude", "weighted_f1"] + [f"f1_{n}" for n in class_names]


def write_curves_csv(points, path, class_names):
    rows = []
    for p in points:
        row = {
            "model": p.model,
            "perturbation_kind": p.kind.value,
            "magnitude": p.magnitude,
            "weighted_f1": p.weighted_f1,
        }
        row.update({f"f1_{n}": float(f) for n, f in zip(class_names, p.class_f1)})
        rows.append(row)
    return write_rows_csv(rows, path, curve_columns(class_names))
