"""
Run configuration: a YAML file mapped onto dataclass sections.

Every key has a default; `--section.key value` command-line flags override
keys one-to-one, with values parsed as YAML scalars. Validation collects
every problem before raising a single ConfigError.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from adversarial import MODES, CONSISTENT
from baselines import ForestConfig, Id3Config, MlpConfig
from errors import ConfigError, NidsError
from flow_ingest import CLASS_TABLES, COUNT_FEATURES
from gnn_model import GnnConfig, resolve_flow_columns
from synthetic_traffic import PatternKind, PatternSpec, default_mix
from training_eval import MODEL_KINDS, TrainConfig

logger = logging.getLogger(__name__)

SOURCES = ("synthetic", "csv")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    csv_paths: tuple = ()
    class_table: str = "synthetic"
    binary: bool = False
    selected_features: tuple = None
    window_size: int = 200
    window_seconds: float = None
    benign_drop_rate: float = 0.9
    train_fraction: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "csv_paths", tuple(str(p) for p in self.csv_paths or ()))
        if self.selected_features is not None:
            object.__setattr__(self, "selected_features", tuple(self.selected_features))
        problems = []
        if self.source not in SOURCES:
            problems.append(f"data.source must be one of {list(SOURCES)}, got '{self.source}'")
        if self.source == "csv" and not self.csv_paths:
            problems.append("data.csv_paths must list at least one file when data.source is 'csv'")
        if self.source == "synthetic" and self.csv_paths:
            problems.append("data.csv_paths must be empty when data.source is 'synthetic'")
        for path in self.csv_paths:
            if not Path(path).is_file():
                problems.append(f"data.csv_paths: file not found: {path}")
        if self.class_table not in CLASS_TABLES:
            problems.append(f"data.class_table must be one of {sorted(CLASS_TABLES)}, got '{self.class_table}'")
        if self.window_size < 1:
            problems.append(f"data.window_size must be >= 1, got {self.window_size}")
        if self.window_seconds is not None and self.window_seconds <= 0:
            problems.append(f"data.window_seconds must be > 0 or null, got {self.window_seconds}")
        if not 0.0 <= self.benign_drop_rate < 1.0:
            problems.append(f"data.benign_drop_rate must be in [0, 1), got {self.benign_drop_rate}")
        if not 0.0 < self.train_fraction < 1.0:
            problems.append(f"data.train_fraction must be in (0, 1), got {self.train_fraction}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class SyntheticConfig:
    window_count: int = 2000
    flows_per_window: int = 200
    mix: tuple = None  # entries {kind, attacker_count, victim_count, flows_per_pair, weight}; None -> default mix

    def __post_init__(self):
        problems = []
        if self.window_count < 1:
            problems.append(f"synthetic.window_count must be >= 1, got {self.window_count}")
        if self.flows_per_window < 1:
            problems.append(f"synthetic.flows_per_window must be >= 1, got {self.flows_per_window}")
        if self.mix is not None:
            object.__setattr__(self, "mix", tuple(dict(entry) for entry in self.mix))
            for i, entry in enumerate(self.mix):
                try:
                    pattern_from_entry(entry)[0].validate()
                except (NidsError, KeyError, TypeError, ValueError) as e:
                    problems.append(f"synthetic.mix[{i}]: {e}")
        if problems:
            raise ConfigError(problems)

    def pattern_mix(self):
        if self.mix is None:
            return default_mix()
        return [pattern_from_entry(entry) for entry in self.mix]


def pattern_from_entry(entry):
    values = dict(entry)
    weight = float(values.pop("weight", 1.0))
    kind = PatternKind(values.pop("kind"))
    return PatternSpec(kind, **values), weight


@dataclass(frozen=True)
class ModelConfig:
    """GNN sizes and the input features that seed flow states; counts come from the data."""

    hidden_dim: int = 128
    iterations: int = 8
    message_hidden: int = 128
    readout_hidden: tuple = (128, 64)
    flow_features: tuple = COUNT_FEATURES  # None: every selected feature

    def __post_init__(self):
        object.__setattr__(self, "readout_hidden", tuple(self.readout_hidden))
        problems = []
        if self.flow_features is not None:
            object.__setattr__(self, "flow_features", tuple(self.flow_features))
            if not self.flow_features:
                problems.append("model.flow_features must name at least one feature or be null")
            elif len(set(self.flow_features)) != len(self.flow_features):
                problems.append(f"model.flow_features repeats a name: {list(self.flow_features)}")
            if len(self.flow_features) > self.hidden_dim >= 1:
                problems.append(
                    f"model.hidden_dim ({self.hidden_dim}) must be >= the {len(self.flow_features)} flow_features"
                )
        # sizes alone, checked against the smallest valid data shape
        try:
            GnnConfig(feature_count=0, class_count=2, **self.sizes())
        except ConfigError as e:
            problems.extend(e.problems)
        if problems:
            raise ConfigError(problems)

    def sizes(self):
        return {
            "hidden_dim": self.hidden_dim,
            "iterations": self.iterations,
            "message_hidden": self.message_hidden,
            "readout_hidden": self.readout_hidden,
        }

    def gnn_config(self, feature_names, class_count):
        """GnnConfig for input vectors with the given feature names."""
        return GnnConfig(
            feature_count=len(feature_names),
            class_count=class_count,
            flow_columns=resolve_flow_columns(feature_names, self.flow_features),
            **self.sizes(),
        )


@dataclass(frozen=True)
class SweepConfig:
    packet_sizes: tuple = (0, 50, 100, 150, 200)
    iat_seconds: tuple = (0, 0.5, 1, 1.5, 2)
    mode: str = CONSISTENT
    models: tuple = MODEL_KINDS

    def __post_init__(self):
        for name in ("packet_sizes", "iat_seconds", "models"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        problems = []
        if self.mode not in MODES:
            problems.append(f"sweep.mode must be one of {list(MODES)}, got '{self.mode}'")
        unknown = [m for m in self.models if m not in MODEL_KINDS]
        if unknown:
            problems.append(f"sweep.models has unknown kinds {unknown}")
        for name, limit in (("packet_sizes", 200.0), ("iat_seconds", 2.0)):
            values = list(getattr(self, name))
            if values != sorted(values) or (values and 0 not in values):
                problems.append(f"sweep.{name} must be sorted ascending and include 0")
            if any(v < 0 or v > limit for v in values):
                problems.append(f"sweep.{name} values must lie in [0, {limit}]")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class HoldoutConfig:
    runs: int = 5
    model: str = "gnn"

    def __post_init__(self):
        problems = []
        if self.runs < 1:
            problems.append(f"holdout.runs must be >= 1, got {self.runs}")
        if self.model not in MODEL_KINDS:
            problems.append(f"holdout.model must be one of {list(MODEL_KINDS)}, got '{self.model}'")
        if problems:
            raise ConfigError(problems)


SECTIONS = {
    "data": DataConfig,
    "synthetic": SyntheticConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "id3": Id3Config,
    "forest": ForestConfig,
    "mlp": MlpConfig,
    "sweep": SweepConfig,
    "holdout": HoldoutConfig,
}
TOP_LEVEL = {"seed": 0, "output_dir": "runs/default"}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    id3: Id3Config = field(default_factory=Id3Config)
    forest: ForestConfig = field(default_factory=ForestConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    holdout: HoldoutConfig = field(default_factory=HoldoutConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def baseline_config(self, kind):
        return {"id3": self.id3, "random_forest": self.forest, "mlp": self.mlp}.get(kind)

    def to_dict(self):
        return _plain(asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def parse_overrides(tokens):
    """
    Turn ["--train.epochs", "5", "--seed", "3"] into {"train.epochs": 5, "seed": 3}.

    Raises:
        ConfigError: a token is not a --key followed by a value
    """
    overrides = {}
    problems = []
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) == 2:
            problems.append(f"unexpected argument '{token}'")
            i += 1
            continue
        key, _, inline = token[2:].partition("=")
        if not inline:
            if i + 1 >= len(tokens):
                problems.append(f"flag '--{key}' needs a value")
                break
            inline = tokens[i + 1]
            i += 1
        overrides[key] = yaml.safe_load(inline)
        i += 1
    if problems:
        raise ConfigError(problems)
    return overrides


def _apply_overrides(raw, overrides, problems):
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key:
            if section not in TOP_LEVEL:
                problems.append(f"unknown key '{dotted}'")
                continue
            raw[section] = value
            continue
        if section not in SECTIONS:
            problems.append(f"unknown key '{dotted}'")
            continue
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][key] = value


def _build_section(name, cls, values, problems):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        problems.append(f"{name} must be a mapping")
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        problems.extend(f"unknown key '{name}.{k}'" for k in unknown)
        values = {k: v for k, v in values.items() if k in known}
    try:
        return cls(**values)
    except ConfigError as e:
        problems.extend(e.problems)
    except (TypeError, ValueError) as e:
        problems.append(f"{name}: {e}")
    return None


def build_config(raw=None, overrides=None):
    """
    Validate a raw mapping (plus dotted overrides) into a RunConfig.

    Raises:
        ConfigError: listing every invalid or unknown key
    """
    raw = dict(raw or {})
    problems = []
    _apply_overrides(raw, overrides or {}, problems)
    unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
    problems.extend(f"unknown key '{k}'" for k in unknown)

    sections = {name: _build_section(name, cls, raw.get(name), problems) for name, cls in SECTIONS.items()}
    data = sections["data"]
    if data is not None and data.source == "synthetic" and data.class_table != "synthetic":
        problems.append("data.class_table must be 'synthetic' when data.source is 'synthetic'")
    seed = raw.get("seed", TOP_LEVEL["seed"])
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"seed must be a non-negative integer, got {seed!r}")
    output_dir = raw.get("output_dir", TOP_LEVEL["output_dir"])
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("output_dir must be a non-empty path")
    if problems:
        raise ConfigError(problems)
    return RunConfig(seed=seed, output_dir=output_dir, **sections)


def load_config(path=None, overrides=None):
    """Read an optional YAML file, apply overrides and validate."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        logger.debug("Loaded config from %s", path)
    return build_config(raw, overrides)
