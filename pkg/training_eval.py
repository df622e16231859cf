"""
Mini-batch GNN training, evaluation metrics and repeated-holdout runs.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from diff_engine import AdamState, GradientTape, adam_step, softmax_cross_entropy
from errors import ConfigError, DivergenceError, NumericError, ValidationError
from flow_ingest import FlowEncoder, fit_normalizer
from gnn_model import GnnConfig, GnnModel, batch_graphs, forward, init_parameters, resolve_flow_columns
from graph_builder import downsample_benign, make_samples
from utils import child_seeds, write_rows_csv

logger = logging.getLogger(__name__)

GNN = "gnn"
MODEL_KINDS = (GNN, "id3", "random_forest", "mlp")
EVAL_BATCH_SIZE = 32
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_weighted_f1"]
METRICS_COLUMNS = ["run", "class", "precision", "recall", "f1", "support", "loss"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 10
    seed: int = 0
    progress: bool = True

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            problems.append("train.beta1 and train.beta2 must be in [0, 1)")
        if self.patience is not None and self.patience < 1:
            problems.append(f"train.patience must be >= 1 or null, got {self.patience}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    train_loss: float
    val_loss: float
    val_weighted_f1: float


@dataclass(frozen=True)
class Metrics:
    """Per-class scores from one confusion matrix; scores of empty classes are 0."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_f1: float
    loss: float = float("nan")

    @property
    def class_count(self):
        return len(self.support)


@dataclass(frozen=True)
class Evaluation:
    metrics: Metrics
    confusion: np.ndarray
    flow_count: int


def confusion_matrix(y_true, y_pred, class_count):
    """C x C counts; rows are the true class, columns the predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError(f"{y_true.shape[0]} labels but {y_pred.shape[0]} predictions")
    for name, values in (("label", y_true), ("prediction", y_pred)):
        if values.size and (values.min() < 0 or values.max() >= class_count):
            raise ValidationError(f"{name} out of range [0, {class_count})")
    flat = np.bincount(y_true * class_count + y_pred, minlength=class_count * class_count)
    return flat.reshape(class_count, class_count)


def _safe_divide(numerator, denominator):
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


def compute_metrics(confusion, loss=float("nan")):
    """
    Precision, recall and F1 per class plus the support-weighted F1.

    Every 0/0 ratio is defined as 0; classes with no support carry zero weight.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    true_positive = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    precision = _safe_divide(true_positive, predicted)
    recall = _safe_divide(true_positive, support)
    f1 = _safe_divide(2.0 * precision * recall, precision + recall)
    total = support.sum()
    weighted = float(np.dot(support, f1) / total) if total > 0 else 0.0
    return Metrics(precision, recall, f1, support, weighted, float(loss))


def stack_flows(samples):
    """Flow feature rows and labels of every sample, in sample order."""
    if not samples:
        raise ValidationError("No graph samples given")
    features = np.concatenate([s.graph.flow_features for s in samples], axis=0)
    labels = np.concatenate([s.graph.flow_labels for s in samples])
    return features, labels


def _gnn_probabilities(model, samples):
    blocks = []
    for start in range(0, len(samples), EVAL_BATCH_SIZE):
        batch = batch_graphs([s.graph for s in samples[start:start + EVAL_BATCH_SIZE]])
        blocks.append(model.predict_arrays(batch)[1])
    return np.concatenate(blocks, axis=0)


def predict_samples(model, samples):
    """
    Predicted class and probability row for every flow of every sample.

    The GNN sees each graph whole; flow-level baselines see each flow vector alone.
    """
    if isinstance(model, GnnModel):
        model.require_fitted()
        probabilities = _gnn_probabilities(model, samples)
    else:
        from baselines import predict_proba

        features, _ = stack_flows(samples)
        probabilities = predict_proba(model, features)
    return np.argmax(probabilities, axis=1), probabilities


def evaluate(model, samples):
    """
    Pool flows across all samples into one confusion matrix.

    Loss is the mean cross-entropy of the predicted probabilities.
    """
    if not samples:
        raise ValidationError("evaluate() needs at least one graph sample")
    _, labels = stack_flows(samples)
    predicted, probabilities = predict_samples(model, samples)
    class_count = probabilities.shape[1]
    picked = probabilities[np.arange(len(labels)), labels]
    loss = float(np.mean(-np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    confusion = confusion_matrix(labels, predicted, class_count)
    return Evaluation(compute_metrics(confusion, loss), confusion, int(len(labels)))


def _train_step(batch, params, gnn_config, adam, epoch, batch_number):
    try:
        with GradientTape() as tape:
            loss = softmax_cross_entropy(forward(batch, params, gnn_config), batch.flow_labels)
    except NumericError as e:
        raise DivergenceError(f"Non-finite values in the forward pass: {e}", epoch, batch_number)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError("Non-finite training loss", epoch, batch_number)
    grads = tape.backward(loss, params)
    adam_step(params, grads, adam)
    return value


def train(train_samples, val_samples, config, rng, gnn_config, class_names=None):
    """
    Train the GNN with Adam on per-epoch shuffled mini-batches of graphs.

    Args:
        train_samples: GraphSample list, benign downsampling already applied
        val_samples: GraphSample list used for model selection
        config: TrainConfig
        rng: numpy Generator; drives initialization and shuffling
        gnn_config: GnnConfig
        class_names: Names for the model's classes

    Returns:
        (GnnModel holding the best-validation parameters, list of HistoryEntry)

    Raises:
        DivergenceError: a batch produced a non-finite loss
    """
    if not train_samples or not val_samples:
        raise ValidationError("train() needs non-empty training and validation samples")
    if class_names is None:
        class_names = tuple(f"class_{i}" for i in range(gnn_config.class_count))
    init_seed, shuffle_seed = child_seeds(rng, 2)
    params = init_parameters(gnn_config, np.random.default_rng(init_seed))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    model = GnnModel(gnn_config, params, tuple(class_names), fitted=True)
    adam = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)

    history = []
    best = None
    best_key = None
    stale = 0
    epochs = tqdm(range(1, config.epochs + 1), desc="epochs", disable=not config.progress)
    for epoch in epochs:
        order = shuffle_rng.permutation(len(train_samples))
        total_loss = 0.0
        total_flows = 0
        for batch_number, start in enumerate(range(0, len(order), config.batch_size)):
            batch = batch_graphs([train_samples[i].graph for i in order[start:start + config.batch_size]])
            value = _train_step(batch, params, gnn_config, adam, epoch, batch_number)
            total_loss += value * batch.flow_count
            total_flows += batch.flow_count
            logger.debug("epoch %d batch %d loss %.6f", epoch, batch_number, value)

        validation = evaluate(model, val_samples).metrics
        entry = HistoryEntry(epoch, total_loss / total_flows, validation.loss, validation.weighted_f1)
        history.append(entry)
        logger.info(
            "Epoch %d: train loss %.5f, val loss %.5f, val weighted F1 %.4f",
            epoch, entry.train_loss, entry.val_loss, entry.val_weighted_f1,
        )

        key = (entry.val_weighted_f1, -entry.val_loss)
        if best_key is None or key > best_key:
            best_key = key
            best = params.to_arrays()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                logger.info("Early stop after epoch %d (no improvement for %d epochs)", epoch, stale)
                break

    params.assign(best)
    model.history = history
    return model, history


def prepare_split(train_windows, val_windows, schema, class_table, first_val_id=None):
    """
    Fit normalization on the training windows only and build both sample lists.

    Returns:
        (FlowEncoder, train GraphSamples, validation GraphSamples)
    """
    train_records = [r for window in train_windows for r in window]
    stats = fit_normalizer(train_records, schema)
    encoder = FlowEncoder(schema, stats, class_table)
    train_samples = make_samples(train_windows, encoder, 0)
    first_val_id = len(train_windows) if first_val_id is None else first_val_id
    val_samples = make_samples(val_windows, encoder, first_val_id)
    return encoder, train_samples, val_samples


def split_indices(count, train_fraction, rng):
    """Random train/validation index split; both sides non-empty."""
    if count < 2:
        raise ValidationError(f"Need at least 2 windows to split, got {count}")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_count = min(count - 1, max(1, int(round(train_fraction * count))))
    order = rng.permutation(count)
    return np.sort(order[:train_count]), np.sort(order[train_count:])


def fit_model(kind, train_samples, val_samples, rng, class_names, train_config=None,
              gnn_config=None, baseline_config=None):
    """
    Train one model of the given kind on graph samples.

    Returns:
        (model, history); history is empty for tree baselines
    """
    if kind == GNN:
        return train(train_samples, val_samples, train_config, rng, gnn_config, class_names)
    if kind not in MODEL_KINDS:
        raise ConfigError(f"Unknown model kind '{kind}', expected one of {list(MODEL_KINDS)}")
    from baselines import train_baseline

    features, labels = stack_flows(train_samples)
    return train_baseline(kind, features, labels, len(class_names), baseline_config, rng, class_names)


@dataclass
class HoldoutRun:
    run: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    evaluation: Evaluation


@dataclass
class HoldoutResult:
    runs: list = field(default_factory=list)

    def scores(self):
        return np.array([r.evaluation.metrics.weighted_f1 for r in self.runs])

    @property
    def mean_weighted_f1(self):
        return float(self.scores().mean())

    @property
    def std_weighted_f1(self):
        scores = self.scores()
        return float(scores.std(ddof=1)) if len(scores) > 1 else 0.0


def repeated_holdout(windows, runs=5, train_fraction=0.8, *, schema, class_table, rng,
                     drop_rate=0.9, kind=GNN, train_config=None, model_settings=None,
                     baseline_config=None):
    """
    Independent seeded train/validation splits of the windows, each trained and evaluated.

    Normalization and benign downsampling come from each run's training part
    only; evaluation uses the full validation part.

    Args:
        windows: Flow sets, one per graph sample
        runs: Number of holdouts
        train_fraction: Share of windows used for training
        schema: FeatureSchema of the records
        class_table: ClassTable for labels
        rng: numpy Generator; split, downsampling and training seeds derive from it
        drop_rate: Benign-only sample drop probability for the training part
        kind: "gnn" or a baseline kind
        train_config: TrainConfig for the GNN
        model_settings: dict of GnnConfig sizes (hidden_dim, iterations, ...) and
            optionally flow_features, the input feature names seeding flow states
        baseline_config: config section for the baseline kind

    Returns:
        HoldoutResult
    """
    if runs < 1:
        raise ValidationError(f"runs must be >= 1, got {runs}")
    windows = [w for w in windows if w]
    result = HoldoutResult()
    for run, seed in enumerate(child_seeds(rng, runs)):
        run_rng = np.random.default_rng(seed)
        train_idx, val_idx = split_indices(len(windows), train_fraction, run_rng)
        encoder, train_samples, val_samples = prepare_split(
            [windows[i] for i in train_idx], [windows[i] for i in val_idx], schema, class_table
        )
        train_samples = downsample_benign(train_samples, drop_rate, run_rng)
        gnn_config = None
        if kind == GNN:
            settings = dict(model_settings or {})
            columns = resolve_flow_columns(encoder.feature_names, settings.pop("flow_features", None))
            gnn_config = GnnConfig(encoder.feature_count, encoder.class_count, flow_columns=columns, **settings)
        model, _ = fit_model(
            kind, train_samples, val_samples, run_rng, class_table.class_names,
            train_config, gnn_config, baseline_config,
        )
        evaluation = evaluate(model, val_samples)
        logger.info("Holdout run %d: weighted F1 %.4f", run, evaluation.metrics.weighted_f1)
        result.runs.append(HoldoutRun(run, train_idx, val_idx, evaluation))
    logger.info(
        "Repeated holdout (%d runs): weighted F1 %.4f +/- %.4f",
        runs, result.mean_weighted_f1, result.std_weighted_f1,
    )
    return result


def metrics_rows(metrics, class_names, run=0):
    rows = [
        {
            "run": run,
            "class": name,
            "precision": float(metrics.precision[c]),
            "recall": float(metrics.recall[c]),
            "f1": float(metrics.f1[c]),
            "support": int(metrics.support[c]),
            "loss": "",
        }
        for c, name in enumerate(class_names)
    ]
    rows.append({
        "run": run,
        "class": "weighted",
        "precision": "",
        "recall": "",
        "f1": float(metrics.weighted_f1),
        "support": int(metrics.support.sum()),
        "loss": float(metrics.loss),
    })
    return rows


def write_metrics_csv(metrics, path, class_names, run=0):
    """One row per class plus a summary row holding the weighted F1 and loss."""
    return write_rows_csv(metrics_rows(metrics, class_names, run), path, METRICS_COLUMNS)


def write_holdout_csv(result, path, class_names):
    """Per-run metrics rows, then mean and std rows of every per-class F1 and the weighted F1."""
    rows = []
    for run in result.runs:
        rows.extend(metrics_rows(run.evaluation.metrics, class_names, run.run))
    f1 = np.array([run.evaluation.metrics.f1 for run in result.runs])
    ddof = 1 if len(result.runs) > 1 else 0
    for label, values, weighted in (
        ("mean", f1.mean(axis=0), result.mean_weighted_f1),
        ("std", f1.std(axis=0, ddof=ddof), result.std_weighted_f1),
    ):
        for c, name in enumerate(class_names):
            rows.append({"run": label, "class": name, "f1": float(values[c])})
        rows.append({"run": label, "class": "weighted", "f1": weighted})
    return write_rows_csv(rows, path, METRICS_COLUMNS)


def write_history_csv(history, path):
    rows = [
        {
            "epoch": h.epoch,
            "train_loss": h.train_loss,
            "val_loss": h.val_loss,
            "val_weighted_f1": h.val_weighted_f1,
        }
        for h in history
    ]
    return write_rows_csv(rows, path, HISTORY_COLUMNS)
