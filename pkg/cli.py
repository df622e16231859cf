"""
Command-line entry point for the intrusion-detection pipeline.

Usage:
    python cli.py synth  --config config.yaml
    python cli.py graphs --config config.yaml
    python cli.py train  --config config.yaml --model gnn
    python cli.py eval   --config config.yaml --model gnn
    python cli.py sweep  --config config.yaml
    python cli.py report --config config.yaml

Any config key can be overridden with a dotted flag, e.g. `--train.epochs 5`.
Every subcommand works inside `output_dir`: ingest/synth write the flows,
the window split and the training-partition normalization there, later
subcommands read them back.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

import model_io
from config import load_config, parse_overrides
from errors import ConfigError, NidsError, NotFittedError, ValidationError
from flow_ingest import (
    FlowEncoder,
    clean_records,
    default_schema,
    filter_records,
    fit_normalizer,
    get_class_table,
    load_normalizer,
    parse_flow_csv,
    parse_flow_files,
    save_normalizer,
    schema_from_header,
    write_flow_csv,
)
from graph_builder import (
    downsample_benign,
    graph_stats,
    make_samples,
    sort_by_time,
    window_flows,
    window_flows_by_time,
    write_graph_dump,
)
from system_check import check_dependencies, collect_versions
from training_eval import (
    GNN,
    MODEL_KINDS,
    evaluate,
    fit_model,
    repeated_holdout,
    split_indices,
    write_history_csv,
    write_holdout_csv,
    write_metrics_csv,
)
from utils import output_lock, stage_rng, write_rows_csv

logger = logging.getLogger(__name__)

FLOWS_FILE = "flows.csv"
SPLIT_FILE = "split.json"
NORMALIZATION_FILE = "normalization.json"
MANIFEST_FILE = "manifest.json"
LOG_FILE = "run.log"
CURVES_FILE = "curves.csv"

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def configure_logging(level, output_dir):
    """Console handler at `level` plus a timestamped run.log in the output directory."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.DEBUG)

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)

    Path(output_dir).mkdir(parents=True, exist_ok=True)
    log_file = logging.FileHandler(Path(output_dir) / LOG_FILE, mode="a", encoding="utf-8")
    log_file.setLevel(logging.DEBUG)
    log_file.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(log_file)


def write_manifest(config, command, output_dir):
    manifest = {
        "command": command,
        "seed": config.seed,
        "config": config.to_dict(),
        "versions": collect_versions(),
    }
    path = Path(output_dir) / MANIFEST_FILE
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _class_table(config):
    return get_class_table(config.data.class_table, config.data.binary)


def _split_windows(windows, schema, config, out):
    """Seeded train/validation split, training-only normalization, then write everything."""
    train_idx, val_idx = split_indices(len(windows), config.data.train_fraction, stage_rng(config.seed, "split"))
    stats = fit_normalizer([r for i in train_idx for r in windows[i]], schema)
    records = [r for window in windows for r in window]
    bounds = np.cumsum([0] + [len(w) for w in windows]).tolist()

    write_flow_csv(records, out / FLOWS_FILE, schema)
    save_normalizer(stats, out / NORMALIZATION_FILE)
    with open(out / SPLIT_FILE, "w") as f:
        json.dump({
            "windows": [[bounds[i], bounds[i + 1]] for i in range(len(windows))],
            "train": [int(i) for i in train_idx],
            "val": [int(i) for i in val_idx],
        }, f)
    logger.info(
        "%d windows (%d flows): %d train, %d validation", len(windows), len(records), len(train_idx), len(val_idx)
    )


def cmd_ingest(args, config, out):
    if config.data.source != "csv":
        raise ValidationError("ingest reads CSV files; set data.source to 'csv'")
    header = pd.read_csv(config.data.csv_paths[0], nrows=0, encoding="utf-8", encoding_errors="replace").columns
    schema = schema_from_header(header, config.data.selected_features)
    records = parse_flow_files(config.data.csv_paths, schema)
    records, filtered = filter_records(records, _class_table(config))
    records, report = clean_records(records)
    logger.info(
        "Cleaning: %d values replaced, %d rows dropped, %d filtered",
        report.replaced_total, report.dropped, sum(filtered.values()),
    )
    records = sort_by_time(records)
    if config.data.window_seconds:
        windows = window_flows_by_time(records, config.data.window_seconds)
    else:
        windows = window_flows(records, config.data.window_size)
    _split_windows(windows, schema, config, out)


def cmd_synth(args, config, out):
    from synthetic_traffic import generate_dataset

    if config.data.source != "synthetic":
        raise ValidationError("synth generates data; set data.source to 'synthetic'")
    dataset = generate_dataset(
        config.synthetic.pattern_mix(),
        config.synthetic.window_count,
        config.synthetic.flows_per_window,
        stage_rng(config.seed, "synthetic"),
    )
    _split_windows(dataset.windows, default_schema(config.data.selected_features), config, out)


class Workspace:
    """Flows, split and normalization written by ingest/synth, read back."""

    def __init__(self, config, out):
        for name in (FLOWS_FILE, SPLIT_FILE, NORMALIZATION_FILE):
            if not (out / name).exists():
                raise ValidationError(f"{out / name} not found; run 'ingest' or 'synth' first")
        stats = load_normalizer(out / NORMALIZATION_FILE)
        header = pd.read_csv(out / FLOWS_FILE, nrows=0).columns
        self.schema = schema_from_header(header, stats.feature_names)
        self.class_table = _class_table(config)
        self.encoder = FlowEncoder(self.schema, stats, self.class_table)
        records = parse_flow_csv(out / FLOWS_FILE, self.schema)
        with open(out / SPLIT_FILE, "r") as f:
            split = json.load(f)
        self.windows = [records[start:stop] for start, stop in split["windows"]]
        self.train_idx = split["train"]
        self.val_idx = split["val"]
        self.config = config

    @property
    def class_names(self):
        return self.class_table.class_names

    def samples(self, indices):
        return [s for i in indices for s in make_samples([self.windows[i]], self.encoder, i)]

    def train_samples(self):
        samples = self.samples(self.train_idx)
        return downsample_benign(samples, self.config.data.benign_drop_rate, stage_rng(self.config.seed, "downsample"))

    def val_samples(self):
        return self.samples(self.val_idx)

    def val_windows(self):
        return [self.windows[i] for i in self.val_idx]


def cmd_graphs(args, config, out):
    ws = Workspace(config, out)
    rows = []
    partitions = (("train", ws.train_samples()), ("val", ws.val_samples()))
    for partition, samples in partitions:
        for sample in samples:
            stats = graph_stats(sample.graph)
            rows.append({"window_id": sample.window_id, "partition": partition,
                         "benign_only": sample.benign_only, **asdict(stats)})
    write_rows_csv(rows, out / "graph_stats.csv")
    if args.dump:
        write_graph_dump([s for _, samples in partitions for s in samples], out / "graphs.jsonl")
    logger.info(
        "Built %d training graphs (after benign downsampling) and %d validation graphs",
        len(partitions[0][1]), len(partitions[1][1]),
    )


def model_path(out, kind):
    return out / "models" / f"{kind}.json"


def save_any_model(model, path):
    from baselines import save_baseline
    from gnn_model import GnnModel, save_model

    if isinstance(model, GnnModel):
        return save_model(model, path)
    return save_baseline(model, path)


def load_any_model(path):
    from baselines import load_baseline
    from gnn_model import load_model

    if not Path(path).exists():
        raise NotFittedError(f"No trained model at {path}; run 'train' first")
    if model_io.peek_kind(path) == GNN:
        return load_model(path)
    return load_baseline(path)


def cmd_train(args, config, out):
    ws = Workspace(config, out)
    kind = args.model
    gnn_config = None
    if kind == GNN:
        gnn_config = config.model.gnn_config(ws.encoder.feature_names, ws.encoder.class_count)
    model, history = fit_model(
        kind, ws.train_samples(), ws.val_samples(), stage_rng(config.seed, f"train:{kind}"),
        ws.class_names, config.train, gnn_config, config.baseline_config(kind),
    )
    save_any_model(model, model_path(out, kind))
    if history:
        write_history_csv(history, out / f"history_{kind}.csv")


def cmd_eval(args, config, out):
    ws = Workspace(config, out)
    path = Path(args.model_path) if args.model_path else model_path(out, args.model)
    model = load_any_model(path)
    name = args.model if not args.model_path else path.stem
    result = evaluate(model, ws.val_samples())
    write_metrics_csv(result.metrics, out / f"metrics_{name}.csv", ws.class_names)
    confusion = pd.DataFrame(result.confusion, index=ws.class_names, columns=ws.class_names)
    confusion.to_csv(out / f"confusion_{name}.csv", index_label="true\\predicted")
    logger.info("%s: weighted F1 %.4f on %d flows", name, result.metrics.weighted_f1, result.flow_count)


def cmd_sweep(args, config, out):
    from adversarial import robustness_sweep, sweep_grid, write_curves_csv

    ws = Workspace(config, out)
    models = [(kind, load_any_model(model_path(out, kind))) for kind in config.sweep.models]
    grid = sweep_grid(config.sweep.packet_sizes, config.sweep.iat_seconds, config.sweep.mode)
    points = robustness_sweep(models, ws.val_windows(), grid, ws.encoder, progress=config.train.progress)
    write_curves_csv(points, out / CURVES_FILE, ws.class_names)


def cmd_report(args, config, out):
    """Aggregate existing metrics and curves; never touches a model."""
    columns = {}
    for kind in MODEL_KINDS:
        path = out / f"metrics_{kind}.csv"
        if path.exists():
            frame = pd.read_csv(path)
            columns[kind] = frame.set_index("class")["f1"]
    if not columns:
        raise ValidationError(f"No metrics_*.csv files in {out}; run 'eval' first")
    summary = pd.DataFrame(columns)
    summary.index.name = "class"
    summary.to_csv(out / "summary.csv", float_format="%.17g")

    if (out / CURVES_FILE).exists():
        curves = pd.read_csv(out / CURVES_FILE)
        table = curves.pivot_table(
            index=["perturbation_kind", "magnitude"], columns="model", values="weighted_f1", sort=True
        )
        table.to_csv(out / "report_curves.csv", float_format="%.17g")
    logger.info("Report written for models: %s", ", ".join(columns))


def cmd_holdout(args, config, out):
    ws = Workspace(config, out)
    kind = config.holdout.model
    result = repeated_holdout(
        ws.windows,
        config.holdout.runs,
        config.data.train_fraction,
        schema=ws.schema,
        class_table=ws.class_table,
        rng=stage_rng(config.seed, "holdout"),
        drop_rate=config.data.benign_drop_rate,
        kind=kind,
        train_config=config.train,
        model_settings=asdict(config.model),
        baseline_config=config.baseline_config(kind),
    )
    write_holdout_csv(result, out / f"holdout_{kind}.csv", ws.class_names)


COMMANDS = {
    "ingest": (cmd_ingest, "Parse, filter and clean flow CSVs; split windows; fit normalization"),
    "synth": (cmd_synth, "Generate a synthetic dataset; split windows; fit normalization"),
    "graphs": (cmd_graphs, "Build graph samples and write per-graph statistics"),
    "train": (cmd_train, "Train the GNN or a baseline and save it"),
    "eval": (cmd_eval, "Evaluate a saved model on the validation windows"),
    "sweep": (cmd_sweep, "Robustness curves under packet-size and inter-arrival perturbations"),
    "report": (cmd_report, "Summarize metrics and curves already in the output directory"),
    "holdout": (cmd_holdout, "Repeated random train/validation holdouts"),
}


def build_parser():
    parser = _Parser(prog="cli.py", description="GNN-based network intrusion detection pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        sub.add_argument("--config", help="YAML config file (see config.example.yaml)")
        sub.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if name in ("train", "eval"):
            sub.add_argument("--model", default=GNN, choices=MODEL_KINDS, help="Model kind")
        if name == "eval":
            sub.add_argument("--model-path", help="Evaluate this model file instead of models/<kind>.json")
        if name == "graphs":
            sub.add_argument("--dump", action="store_true", help="Also write graphs.jsonl")
    return parser


def run_cli(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_INVALID

    try:
        config = load_config(args.config, parse_overrides(rest))
    except ConfigError as e:
        print(f"Invalid configuration ({len(e.problems)} problems):", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_INVALID

    out = Path(config.output_dir)
    configure_logging(args.log_level, out)
    missing = check_dependencies()
    if missing:
        logger.error("Missing required packages: %s", ", ".join(missing))
        return EXIT_RUNTIME
    handler, _ = COMMANDS[args.command]
    try:
        with output_lock(out):
            write_manifest(config, args.command, out)
            handler(args, config, out)
    except ValidationError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_INVALID
    except (NidsError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
