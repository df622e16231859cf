"""
Flow record ingestion: parse CIC-IDS2017-style CSV files, clean known
dataset artifacts, map raw labels onto the retained class table and
z-score normalize the selected features.
"""

import json
import logging
import math
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from errors import LabelError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

SOURCE_IP = "Source IP"
DESTINATION_IP = "Destination IP"
SOURCE_PORT = "Source Port"
DESTINATION_PORT = "Destination Port"
PROTOCOL = "Protocol"
TIMESTAMP = "Timestamp"
DURATION = "Flow Duration"
LABEL = "Label"
FLOW_ID = "Flow ID"

REQUIRED_COLUMNS = (
    SOURCE_IP, DESTINATION_IP, SOURCE_PORT, DESTINATION_PORT,
    PROTOCOL, TIMESTAMP, DURATION, LABEL,
)

# Never model inputs: they name endpoints, not behaviour
IDENTIFIER_COLUMNS = frozenset({
    FLOW_ID, SOURCE_IP, DESTINATION_IP, SOURCE_PORT, DESTINATION_PORT, PROTOCOL, TIMESTAMP,
})

FWD_PACKETS = "Total Fwd Packets"
BWD_PACKETS = "Total Backward Packets"
FWD_BYTES = "Total Length of Fwd Packets"
BWD_BYTES = "Total Length of Bwd Packets"

RATE_FEATURES = frozenset({"Flow Bytes/s", "Flow Packets/s", "Fwd Packets/s", "Bwd Packets/s"})
PACKET_COUNT_FEATURES = frozenset({FWD_PACKETS, BWD_PACKETS})
FLAG_COUNT_FEATURES = (
    "FIN Flag Count", "SYN Flag Count", "RST Flag Count", "PSH Flag Count", "ACK Flag Count", "URG Flag Count",
)
# Per-flow cues that packet padding and gap stretching leave untouched
COUNT_FEATURES = (FWD_PACKETS, BWD_PACKETS) + FLAG_COUNT_FEATURES

BENIGN_LABEL = "BENIGN"


class ColumnKind(str, Enum):
    NUMERIC = "numeric"
    IDENTIFIER = "identifier"
    LABEL = "label"


# Column order of the intermediate files and of the synthetic generator
DEFAULT_FEATURE_COLUMNS = (
    DURATION,
    FWD_PACKETS,
    BWD_PACKETS,
    FWD_BYTES,
    BWD_BYTES,
    "Fwd Packet Length Max",
    "Fwd Packet Length Min",
    "Fwd Packet Length Mean",
    "Fwd Packet Length Std",
    "Bwd Packet Length Max",
    "Bwd Packet Length Min",
    "Bwd Packet Length Mean",
    "Bwd Packet Length Std",
    "Flow Bytes/s",
    "Flow Packets/s",
    "Flow IAT Mean",
    "Flow IAT Std",
    "Flow IAT Max",
    "Flow IAT Min",
    "Fwd IAT Total",
    "Fwd IAT Mean",
    "Fwd IAT Std",
    "Bwd IAT Total",
    "Bwd IAT Mean",
    "Bwd IAT Std",
    "Fwd Packets/s",
    "Bwd Packets/s",
    "Packet Length Mean",
    "Packet Length Std",
    "Average Packet Size",
    "FIN Flag Count",
    "SYN Flag Count",
    "RST Flag Count",
    "PSH Flag Count",
    "ACK Flag Count",
    "URG Flag Count",
)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered column declaration plus the feature subset fed to the models."""

    columns: tuple
    selected_features: tuple

    def __post_init__(self):
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("Duplicate column names in schema")
        missing = [name for name in REQUIRED_COLUMNS if name not in names]
        if missing:
            raise SchemaError(f"Schema is missing required columns: {missing}")
        if not self.selected_features:
            raise SchemaError("selected_features must not be empty")
        if len(set(self.selected_features)) != len(self.selected_features):
            raise SchemaError("selected_features contains duplicates")
        kinds = dict(self.columns)
        for name in self.selected_features:
            if name in IDENTIFIER_COLUMNS or kinds.get(name) == ColumnKind.IDENTIFIER:
                raise SchemaError(f"Identifier column '{name}' cannot be a model feature")
            if kinds.get(name) != ColumnKind.NUMERIC:
                raise SchemaError(f"Selected feature '{name}' is not a numeric schema column")

    @property
    def column_names(self):
        return [name for name, _ in self.columns]

    @property
    def numeric_columns(self):
        return [name for name, kind in self.columns if kind == ColumnKind.NUMERIC]

    @property
    def feature_columns(self):
        """Numeric columns stored in RawFlowRecord.features (duration has its own field)."""
        return [name for name in self.numeric_columns if name != DURATION]

    def with_selection(self, names):
        return FeatureSchema(self.columns, tuple(names))


def build_schema(feature_columns=DEFAULT_FEATURE_COLUMNS, selected_features=None):
    """
    Build a schema from an ordered list of numeric feature columns.

    Args:
        feature_columns: Numeric columns, including "Flow Duration"
        selected_features: Model inputs; None selects every numeric column

    Returns:
        FeatureSchema with the identifier and label columns around the features
    """
    columns = [
        (SOURCE_IP, ColumnKind.IDENTIFIER),
        (SOURCE_PORT, ColumnKind.IDENTIFIER),
        (DESTINATION_IP, ColumnKind.IDENTIFIER),
        (DESTINATION_PORT, ColumnKind.IDENTIFIER),
        (PROTOCOL, ColumnKind.IDENTIFIER),
        (TIMESTAMP, ColumnKind.IDENTIFIER),
    ]
    columns += [(name, ColumnKind.NUMERIC) for name in feature_columns]
    columns.append((LABEL, ColumnKind.LABEL))
    if selected_features is None:
        selected_features = [name for name, kind in columns if kind == ColumnKind.NUMERIC]
    return FeatureSchema(tuple(columns), tuple(selected_features))


def default_schema(selected_features=None):
    return build_schema(DEFAULT_FEATURE_COLUMNS, selected_features)


def schema_from_header(header, selected_features=None):
    """
    Build a schema for an arbitrary CIC-style header.

    Known identifier columns become identifiers, "Label" the label and every
    other column numeric. Repeated header names keep the first occurrence.
    """
    seen = set()
    columns = []
    for raw in header:
        name = str(raw).strip()
        if name in seen or name.lower() in {s.lower() for s in seen}:
            continue
        seen.add(name)
        if name == LABEL:
            kind = ColumnKind.LABEL
        elif name in IDENTIFIER_COLUMNS:
            kind = ColumnKind.IDENTIFIER
        else:
            kind = ColumnKind.NUMERIC
        columns.append((name, kind))
    if selected_features is None:
        selected_features = [name for name, kind in columns if kind == ColumnKind.NUMERIC]
    return FeatureSchema(tuple(columns), tuple(selected_features))


@dataclass(frozen=True, eq=True)
class RawFlowRecord:
    """One bidirectional flow as read from a CSV row."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    timestamp: float
    duration: float
    features: dict = field(hash=False)
    label: str

    def value(self, name):
        """Numeric value of a schema column; "Flow Duration" maps to the duration field."""
        if name == DURATION:
            return self.duration
        return self.features[name]

    @property
    def packet_count(self):
        return self.features.get(FWD_PACKETS, 0.0) + self.features.get(BWD_PACKETS, 0.0)

    @property
    def is_benign(self):
        return normalize_label_text(self.label) == BENIGN_LABEL


@dataclass(frozen=True)
class ClassLabel:
    index: int
    name: str


class _Filtered:
    """Marker for labels of classes excluded from training and evaluation."""

    def __repr__(self):
        return "Filtered"


FILTERED = _Filtered()


@dataclass(frozen=True)
class ClassTable:
    """Ordered (pattern, ClassLabel or FILTERED) entries; index 0 is always Benign."""

    entries: tuple

    def __post_init__(self):
        labels = self.classes
        if not labels or labels[0].index != 0 or labels[0].name != "Benign":
            raise ValidationError("Class table must map index 0 to Benign")
        if [label.index for label in labels] != list(range(len(labels))):
            raise ValidationError("Class indices must be contiguous from 0")

    @property
    def classes(self):
        unique = {}
        for _, target in self.entries:
            if isinstance(target, ClassLabel):
                unique[target.index] = target
        return [unique[i] for i in sorted(unique)]

    @property
    def class_names(self):
        return [label.name for label in self.classes]

    @property
    def class_count(self):
        return len(self.classes)

    def binary(self):
        """Collapse every attack class into a single "Attack" class."""
        attack = ClassLabel(1, "Attack")
        entries = []
        for pattern, target in self.entries:
            if isinstance(target, ClassLabel) and target.index != 0:
                target = attack
            entries.append((pattern, target))
        return ClassTable(tuple(entries))


_BENIGN = ClassLabel(0, "Benign")

CICIDS2017_CLASS_TABLE = ClassTable((
    (BENIGN_LABEL, _BENIGN),
    ("SSH-Patator", ClassLabel(1, "SSH-Patator")),
    ("FTP-Patator", ClassLabel(2, "FTP-Patator")),
    ("DoS GoldenEye", ClassLabel(3, "DoS GoldenEye")),
    ("DoS Hulk", ClassLabel(4, "DoS Hulk")),
    ("DoS slowloris", ClassLabel(5, "DoS slowloris")),
    ("DoS Slowhttptest", ClassLabel(6, "DoS Slowhttptest")),
    ("DDoS", ClassLabel(7, "DDoS")),
    ("Web Attack - Brute Force", ClassLabel(8, "Web-Brute Force")),
    ("Web Attack - XSS", ClassLabel(9, "Web-XSS")),
    ("Bot", ClassLabel(10, "Bot")),
    ("PortScan", ClassLabel(11, "Port Scan")),
    # 100 flow samples or fewer in the dataset
    ("Heartbleed", FILTERED),
    ("Infiltration", FILTERED),
    ("Web Attack - Sql Injection", FILTERED),
))

SYNTHETIC_CLASS_TABLE = ClassTable((
    (BENIGN_LABEL, _BENIGN),
    ("DDoS", ClassLabel(1, "DDoS")),
    ("PortScan", ClassLabel(2, "PortScan")),
    ("NetworkScan", ClassLabel(3, "NetworkScan")),
    ("BruteForce", ClassLabel(4, "BruteForce")),
))

CLASS_TABLES = {
    "cicids2017": CICIDS2017_CLASS_TABLE,
    "synthetic": SYNTHETIC_CLASS_TABLE,
}


def get_class_table(name, binary=False):
    try:
        table = CLASS_TABLES[name]
    except KeyError:
        raise ValidationError(f"Unknown class table '{name}'; expected one of {sorted(CLASS_TABLES)}")
    return table.binary() if binary else table


def normalize_label_text(raw):
    """Trim a raw label and fold the dash variants and mojibake found in the dataset."""
    text = unicodedata.normalize("NFKC", str(raw)).strip()
    for dash in ("�", "–", "—"):
        text = text.replace(dash, "-")
    return " ".join(text.split())


def map_label(raw, class_table):
    """
    Map a raw label string onto the class table.

    Args:
        raw: Label cell as read from the CSV
        class_table: ClassTable or sequence of (pattern, ClassLabel | FILTERED)

    Returns:
        ClassLabel, or FILTERED for classes excluded by the sample-count rule

    Raises:
        LabelError: the label matches no pattern
    """
    entries = class_table.entries if isinstance(class_table, ClassTable) else class_table
    text = normalize_label_text(raw)
    for pattern, target in entries:
        if normalize_label_text(pattern) == text:
            return target
    raise LabelError(f"Unknown class label: {raw!r}")


def filter_records(records, class_table):
    """
    Drop records whose label is FILTERED.

    Returns:
        (kept records, {raw label: filtered count})

    Raises:
        LabelError: listing every unknown label found in the batch
    """
    kept = []
    filtered = {}
    unknown = set()
    cache = {}
    for record in records:
        if record.label not in cache:
            try:
                cache[record.label] = map_label(record.label, class_table)
            except LabelError:
                cache[record.label] = None
                unknown.add(record.label)
        target = cache[record.label]
        if target is None:
            continue
        if target is FILTERED:
            filtered[record.label] = filtered.get(record.label, 0) + 1
            continue
        kept.append(record)
    if unknown:
        raise LabelError(f"Unknown class labels: {sorted(unknown)}")
    for label, count in filtered.items():
        logger.warning("Filtered %d flows of excluded class %r", count, label)
    return kept, filtered


def _match_columns(header, schema):
    lookup = {}
    for column in header:
        lookup.setdefault(str(column).strip().lower(), column)
    resolved = {}
    missing = []
    for name in schema.column_names:
        key = name.strip().lower()
        if key in lookup:
            resolved[name] = lookup[key]
        else:
            missing.append(name)
    if missing:
        raise SchemaError(f"CSV is missing columns: {', '.join(missing)}")
    return resolved


def _to_seconds(series):
    numeric = pd.to_numeric(series, errors="coerce")
    if numeric.notna().all():
        return numeric.to_numpy(dtype=np.float64)
    parsed = pd.to_datetime(series, dayfirst=True, errors="coerce", format="mixed")
    seconds = (parsed - pd.Timestamp("1970-01-01")) / pd.Timedelta(seconds=1)
    return seconds.to_numpy(dtype=np.float64, na_value=np.nan)


def _to_int(series, sentinel=-1):
    numeric = pd.to_numeric(series, errors="coerce")
    values = numeric.to_numpy(dtype=np.float64)
    out = np.full(len(values), sentinel, dtype=np.int64)
    good = np.isfinite(values) & (values == np.floor(values))
    out[good] = values[good].astype(np.int64)
    return out


def parse_flow_csv(path, schema):
    """
    Parse one flow CSV into records, preserving file order.

    Column names are matched after trimming, case-insensitively. Unparseable
    numeric cells become NaN and are left for clean_records to handle.

    Args:
        path: CSV file (".csv" or compressed ".csv.gz")
        schema: FeatureSchema naming the columns to read

    Returns:
        List of RawFlowRecord
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Flow file {path} does not exist")
    suffixes = "".join(path.suffixes).lower()
    if not (suffixes.endswith(".csv") or suffixes.endswith(".csv.gz")):
        raise SchemaError(f"Unsupported flow file format: {path.name}")

    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding="utf-8",
        encoding_errors="replace", low_memory=False,
    )
    columns = _match_columns(frame.columns, schema)

    label_col = columns[LABEL]
    # Repeated header rows appear mid-file in some dataset captures
    repeated = frame[label_col].str.strip().str.lower() == LABEL.lower()
    if repeated.any():
        logger.warning("%s: skipping %d repeated header rows", path.name, int(repeated.sum()))
        frame = frame[~repeated]

    src_ips = frame[columns[SOURCE_IP]].str.strip().tolist()
    dst_ips = frame[columns[DESTINATION_IP]].str.strip().tolist()
    src_ports = _to_int(frame[columns[SOURCE_PORT]])
    dst_ports = _to_int(frame[columns[DESTINATION_PORT]])
    protocols = _to_int(frame[columns[PROTOCOL]])
    timestamps = _to_seconds(frame[columns[TIMESTAMP]])
    durations = pd.to_numeric(frame[columns[DURATION]], errors="coerce").to_numpy(dtype=np.float64)
    labels = frame[label_col].str.strip().tolist()

    feature_names = schema.feature_columns
    feature_values = [
        pd.to_numeric(frame[columns[name]], errors="coerce").to_numpy(dtype=np.float64)
        for name in feature_names
    ]

    records = []
    for row in range(len(frame)):
        features = {name: float(values[row]) for name, values in zip(feature_names, feature_values)}
        records.append(RawFlowRecord(
            src_ip=src_ips[row],
            dst_ip=dst_ips[row],
            src_port=int(src_ports[row]),
            dst_port=int(dst_ports[row]),
            protocol=int(protocols[row]),
            timestamp=float(timestamps[row]),
            duration=float(durations[row]),
            features=features,
            label=labels[row],
        ))
    logger.info("Parsed %d flow records from %s", len(records), path.name)
    return records


def parse_flow_files(paths, schema, max_workers=4):
    """Parse several files concurrently; results are concatenated in the given path order."""
    paths = list(paths)
    if len(paths) <= 1 or max_workers <= 1:
        return [record for path in paths for record in parse_flow_csv(path, schema)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        parts = list(pool.map(lambda p: parse_flow_csv(p, schema), paths))
    return [record for part in parts for record in part]


@dataclass
class CleanReport:
    replaced: dict
    dropped: int

    @property
    def replaced_total(self):
        return sum(self.replaced.values())


def _violates_invariants(record):
    if not math.isfinite(record.duration) or record.duration < 0:
        return True
    if not math.isfinite(record.timestamp):
        return True
    if not (0 <= record.src_port <= 65535 and 0 <= record.dst_port <= 65535):
        return True
    for name in PACKET_COUNT_FEATURES:
        if record.features.get(name, 0.0) < 0:
            return True
    return False


def clean_records(records):
    """
    Apply the non-finite value policy to a batch of records.

    Non-finite rate values are replaced by the largest finite value of that
    rate feature in the batch (0 when none is finite). Records with any other
    non-finite value, or violating record invariants, are dropped.

    Returns:
        (cleaned records, CleanReport with per-feature replacements and drop count)
    """
    if not records:
        return [], CleanReport(replaced={}, dropped=0)

    rate_names = [name for name in records[0].features if name in RATE_FEATURES]
    caps = {}
    for name in rate_names:
        values = np.array([r.features[name] for r in records], dtype=np.float64)
        finite = values[np.isfinite(values)]
        caps[name] = float(finite.max()) if finite.size else 0.0

    cleaned = []
    replaced = {name: 0 for name in rate_names}
    dropped = 0
    for record in records:
        bad_other = any(
            not math.isfinite(value)
            for name, value in record.features.items()
            if name not in RATE_FEATURES
        )
        if bad_other or _violates_invariants(record):
            dropped += 1
            continue
        fixes = {
            name: caps[name]
            for name in rate_names
            if not math.isfinite(record.features[name])
        }
        if fixes:
            for name in fixes:
                replaced[name] += 1
            features = dict(record.features)
            features.update(fixes)
            record = replace(record, features=features)
        cleaned.append(record)

    report = CleanReport(replaced={k: v for k, v in replaced.items() if v}, dropped=dropped)
    if dropped:
        logger.warning("Dropped %d records with non-finite or invalid values", dropped)
    if report.replaced:
        logger.info("Replaced non-finite rate values: %s", report.replaced)
    return cleaned, report


def write_flow_csv(records, path, schema):
    """
    Write records with the schema's header so parse_flow_csv reads them back.

    Floats are written at full precision, so the round trip is exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {}
    for name, kind in schema.columns:
        if name == SOURCE_IP:
            data[name] = [r.src_ip for r in records]
        elif name == DESTINATION_IP:
            data[name] = [r.dst_ip for r in records]
        elif name == SOURCE_PORT:
            data[name] = [r.src_port for r in records]
        elif name == DESTINATION_PORT:
            data[name] = [r.dst_port for r in records]
        elif name == PROTOCOL:
            data[name] = [r.protocol for r in records]
        elif name == TIMESTAMP:
            data[name] = [r.timestamp for r in records]
        elif name == FLOW_ID:
            data[name] = [
                f"{r.src_ip}-{r.dst_ip}-{r.src_port}-{r.dst_port}-{r.protocol}" for r in records
            ]
        elif name == LABEL:
            data[name] = [r.label for r in records]
        else:
            data[name] = [r.value(name) for r in records]
    frame = pd.DataFrame(data, columns=schema.column_names)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info("Wrote %d flow records to %s", len(records), path)
    return path


@dataclass
class NormalizationStats:
    feature_names: tuple
    mean: np.ndarray
    std: np.ndarray
    fit_count: int

    @property
    def constant(self):
        return self.std == 0.0


def feature_matrix(records, names):
    """Raw (unnormalized) values of the named columns, one row per record."""
    matrix = np.empty((len(records), len(names)), dtype=np.float64)
    for i, record in enumerate(records):
        matrix[i] = [record.value(name) for name in names]
    return matrix


def fit_normalizer(records, schema):
    """
    Fit per-feature population mean and standard deviation.

    Fit on the training partition only.

    Raises:
        ValidationError: records is empty
    """
    if not records:
        raise ValidationError("Cannot fit normalization on an empty record set")
    names = tuple(schema.selected_features)
    matrix = feature_matrix(records, names)
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    std = np.sqrt((centered * centered).mean(axis=0))
    constant = matrix.max(axis=0) == matrix.min(axis=0)
    std[constant] = 0.0
    if constant.any():
        logger.warning(
            "Constant features emit 0: %s", [n for n, c in zip(names, constant) if c]
        )
    return NormalizationStats(names, mean, std, len(records))


def _check_stats(stats, schema):
    if tuple(stats.feature_names) != tuple(schema.selected_features):
        raise SchemaError(
            "Normalization stats were fitted on a different feature selection "
            f"({len(stats.feature_names)} vs {len(schema.selected_features)} features)"
        )


def _normalize(values, stats):
    out = np.zeros_like(values, dtype=np.float64)
    active = ~stats.constant
    out[..., active] = (values[..., active] - stats.mean[active]) / stats.std[active]
    return out


def vectorize(record, stats, schema):
    """
    Z-score the record's selected features; constant features emit 0.

    Returns:
        1-D float64 array in selected_features order
    """
    _check_stats(stats, schema)
    values = np.array([record.value(name) for name in schema.selected_features], dtype=np.float64)
    return _normalize(values, stats)


def vectorize_many(records, stats, schema):
    _check_stats(stats, schema)
    return _normalize(feature_matrix(records, schema.selected_features), stats)


def save_normalizer(stats, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "fit_count": int(stats.fit_count),
        "features": {
            name: {"mean": float(m), "std": float(s), "constant": bool(s == 0.0)}
            for name, m, s in zip(stats.feature_names, stats.mean, stats.std)
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    return path


def load_normalizer(path):
    with open(path, "r") as f:
        payload = json.load(f)
    names = tuple(payload["features"])
    mean = np.array([payload["features"][n]["mean"] for n in names], dtype=np.float64)
    std = np.array(
        [0.0 if payload["features"][n]["constant"] else payload["features"][n]["std"] for n in names],
        dtype=np.float64,
    )
    return NormalizationStats(names, mean, std, int(payload["fit_count"]))


@dataclass
class FlowEncoder:
    """Everything needed to turn a record into a model input and a class index."""

    schema: FeatureSchema
    stats: NormalizationStats
    class_table: ClassTable

    @property
    def feature_names(self):
        return tuple(self.schema.selected_features)

    @property
    def feature_count(self):
        return len(self.schema.selected_features)

    @property
    def class_count(self):
        return self.class_table.class_count

    def label_of(self, record):
        target = map_label(record.label, self.class_table)
        if target is FILTERED:
            raise LabelError(f"Record with filtered label {record.label!r} reached the encoder")
        return target

    def encode(self, record):
        return vectorize(record, self.stats, self.schema), self.label_of(record)

    def encode_many(self, records):
        vectors = vectorize_many(records, self.stats, self.schema)
        labels = np.array([self.label_of(r).index for r in records], dtype=np.int64)
        return vectors, labels
