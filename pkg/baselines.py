"""
Flow-level baseline classifiers: an ID3-style tree on numeric thresholds,
a bagged random forest of those trees, and a 3-layer MLP trained with the
same autodiff and Adam machinery as the GNN.

Each baseline sees one flow vector at a time, never the rest of its window.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import model_io
from diff_engine import (
    AdamState,
    GradientTape,
    ParameterStore,
    Tensor,
    adam_step,
    add_dense_layers,
    mlp,
    softmax_cross_entropy,
    softmax_rows,
)
from errors import ConfigError, DivergenceError, ModelFormatError, NotFittedError, NumericError, ValidationError
from flow_ingest import ClassLabel
from utils import child_seeds

logger = logging.getLogger(__name__)

ID3 = "id3"
RANDOM_FOREST = "random_forest"
MLP = "mlp"
MIN_GAIN = 1e-12


@dataclass(frozen=True)
class Id3Config:
    max_depth: int = 20
    min_samples_leaf: int = 5

    def __post_init__(self):
        problems = []
        if self.max_depth < 0:
            problems.append(f"id3.max_depth must be >= 0, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            problems.append(f"id3.min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 50
    feature_fraction: float = None  # None -> sqrt(k) / k
    bootstrap: bool = True
    max_depth: int = 20
    min_samples_leaf: int = 5
    n_jobs: int = 1

    def __post_init__(self):
        problems = []
        if self.tree_count < 1:
            problems.append(f"forest.tree_count must be >= 1, got {self.tree_count}")
        if self.max_depth < 0:
            problems.append(f"forest.max_depth must be >= 0, got {self.max_depth}")
        if self.feature_fraction is not None and not 0.0 < self.feature_fraction <= 1.0:
            problems.append(f"forest.feature_fraction must be in (0, 1], got {self.feature_fraction}")
        if self.min_samples_leaf < 1:
            problems.append(f"forest.min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if problems:
            raise ConfigError(problems)

    def features_per_split(self, feature_count):
        fraction = self.feature_fraction
        if fraction is None:
            fraction = np.sqrt(feature_count) / feature_count
        return min(feature_count, max(1, int(round(fraction * feature_count))))


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple = (128, 64)
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    progress: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        problems = []
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            problems.append(f"mlp.hidden must be two widths >= 1, got {list(self.hidden)}")
        if self.epochs < 1:
            problems.append(f"mlp.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"mlp.batch_size must be >= 1, got {self.batch_size}")
        if problems:
            raise ConfigError(problems)


@dataclass
class TreeNode:
    """Internal when `distribution` is None: rows with x[feature] <= threshold go left."""

    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode" = None
    right: "TreeNode" = None
    distribution: np.ndarray = None

    @property
    def is_leaf(self):
        return self.distribution is not None


@dataclass
class DecisionTree:
    root: TreeNode
    class_count: int
    class_names: tuple = ()

    @property
    def fitted(self):
        return self.root is not None

    def depth(self, node=None):
        node = self.root if node is None else node
        if node.is_leaf:
            return 0
        return 1 + max(self.depth(node.left), self.depth(node.right))

    def leaf_index(self, vector):
        """Path of left(0)/right(1) turns to the leaf a vector reaches."""
        node, path = self.root, []
        while not node.is_leaf:
            go_right = vector[node.feature] > node.threshold
            path.append(int(go_right))
            node = node.right if go_right else node.left
        return tuple(path)

    def predict_proba(self, matrix):
        out = np.zeros((matrix.shape[0], self.class_count))
        _fill_leaf_rows(self.root, matrix, np.arange(matrix.shape[0]), out)
        return out


def _fill_leaf_rows(node, matrix, rows, out):
    if rows.size == 0:
        return
    if node.is_leaf:
        out[rows] = node.distribution
        return
    left = matrix[rows, node.feature] <= node.threshold
    _fill_leaf_rows(node.left, matrix, rows[left], out)
    _fill_leaf_rows(node.right, matrix, rows[~left], out)


def entropy(counts):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    logs = np.log2(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logs).sum(axis=-1)


def best_split(vectors, labels, class_count, features, min_samples_leaf):
    """
    Highest information-gain (feature, threshold) over midpoint thresholds.

    Ties go to the lowest feature index, then the lowest threshold.

    Returns:
        (gain, feature, threshold), or None when no split leaves
        min_samples_leaf rows on both sides
    """
    n = len(labels)
    parent = entropy(np.bincount(labels, minlength=class_count))
    best = None
    positions = np.arange(1, n)  # left side holds rows [0, i)
    onehot = np.eye(class_count)[labels]
    total_counts = onehot.sum(axis=0)
    for feature in sorted(features):
        order = np.argsort(vectors[:, feature], kind="stable")
        values = vectors[order, feature]
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]
        valid = (
            (values[1:] > values[:-1])
            & (positions >= min_samples_leaf)
            & (n - positions >= min_samples_leaf)
        )
        if not valid.any():
            continue
        right_counts = total_counts - left_counts
        children = (positions * entropy(left_counts) + (n - positions) * entropy(right_counts)) / n
        gains = np.where(valid, parent - children, -np.inf)
        i = int(np.argmax(gains))
        gain = float(gains[i])
        if best is None or gain > best[0]:
            low, high = values[i], values[i + 1]
            threshold = (low + high) / 2.0
            if not low <= threshold < high:
                threshold = low
            best = (gain, int(feature), float(threshold))
    return best


def _grow(vectors, labels, class_count, depth, max_depth, min_samples_leaf, choose_features):
    counts = np.bincount(labels, minlength=class_count)
    leaf = TreeNode(distribution=counts / counts.sum())
    if depth >= max_depth or np.count_nonzero(counts) == 1 or len(labels) < 2 * min_samples_leaf:
        return leaf
    split = best_split(vectors, labels, class_count, choose_features(), min_samples_leaf)
    if split is None or split[0] <= MIN_GAIN:
        return leaf
    _, feature, threshold = split
    left = vectors[:, feature] <= threshold

    def grow(mask):
        return _grow(
            vectors[mask], labels[mask], class_count, depth + 1, max_depth, min_samples_leaf, choose_features
        )

    return TreeNode(feature=feature, threshold=threshold, left=grow(left), right=grow(~left))


def _check_training_data(vectors, labels, class_count):
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValidationError("Baselines need a non-empty 2-D feature matrix")
    if labels.shape != (vectors.shape[0],):
        raise ValidationError(f"{labels.shape[0]} labels for {vectors.shape[0]} vectors")
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValidationError(f"label out of range [0, {class_count})")
    return vectors, labels


def train_id3(vectors, labels, class_count, config=None, class_names=()):
    """
    Greedy information-gain tree over numeric midpoint thresholds.

    Stops on purity, max_depth or min_samples_leaf; deterministic for a given
    input order.
    """
    config = config or Id3Config()
    vectors, labels = _check_training_data(vectors, labels, class_count)
    every_feature = list(range(vectors.shape[1]))
    root = _grow(
        vectors, labels, class_count, 0, config.max_depth, config.min_samples_leaf, lambda: every_feature
    )
    tree = DecisionTree(root, class_count, tuple(class_names))
    logger.info("ID3 tree trained on %d flows, depth %d", len(labels), tree.depth())
    return tree


@dataclass
class ForestModel:
    trees: list
    class_count: int
    seeds: tuple
    features_per_split: int
    class_names: tuple = ()

    @property
    def fitted(self):
        return bool(self.trees)

    def predict_proba(self, matrix):
        """Vote proportions of the trees' individual predictions."""
        votes = np.zeros((matrix.shape[0], self.class_count))
        rows = np.arange(matrix.shape[0])
        for tree in self.trees:
            votes[rows, np.argmax(tree.predict_proba(matrix), axis=1)] += 1.0
        return votes / len(self.trees)


def _grow_forest_tree(vectors, labels, class_count, config, per_split, seed):
    tree_rng = np.random.default_rng(seed)
    n, k = vectors.shape
    rows = tree_rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
    every_feature = list(range(k))
    if per_split >= k:
        choose = lambda: every_feature
    else:
        choose = lambda: sorted(int(f) for f in tree_rng.choice(k, size=per_split, replace=False))
    root = _grow(
        vectors[rows], labels[rows], class_count, 0, config.max_depth, config.min_samples_leaf, choose
    )
    return DecisionTree(root, class_count)


def train_random_forest(vectors, labels, class_count, config, rng, class_names=()):
    """
    Bagged ID3 trees with per-split feature subsampling.

    Every tree gets its own seed, so results do not depend on n_jobs.
    """
    config = config or ForestConfig()
    vectors, labels = _check_training_data(vectors, labels, class_count)
    per_split = config.features_per_split(vectors.shape[1])
    seeds = tuple(child_seeds(rng, config.tree_count))
    if config.n_jobs != 1:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=config.n_jobs)(
            delayed(_grow_forest_tree)(vectors, labels, class_count, config, per_split, seed)
            for seed in seeds
        )
    else:
        trees = [
            _grow_forest_tree(vectors, labels, class_count, config, per_split, seed)
            for seed in tqdm(seeds, desc="trees", disable=len(seeds) < 2)
        ]
    logger.info(
        "Random forest trained: %d trees, %d of %d features per split",
        len(trees), per_split, vectors.shape[1],
    )
    return ForestModel(trees, class_count, seeds, per_split, tuple(class_names))


@dataclass
class MlpModel:
    params: ParameterStore
    feature_count: int
    class_count: int
    hidden: tuple
    class_names: tuple = ()
    fitted: bool = False
    history: list = field(default_factory=list, repr=False)

    def logits(self, matrix):
        return mlp(Tensor(matrix), self.params, "mlp", 3, final_activation=None).data

    def predict_proba(self, matrix):
        return softmax_rows(self.logits(matrix))


def new_mlp(feature_count, class_count, hidden, rng, class_names=()):
    params = ParameterStore()
    add_dense_layers(params, "mlp", (feature_count,) + tuple(hidden) + (class_count,), rng)
    return MlpModel(params, feature_count, class_count, tuple(hidden), tuple(class_names))


def train_mlp(vectors, labels, class_count, config, rng, class_names=()):
    """
    Mini-batch Adam on mean cross-entropy.

    Returns:
        (MlpModel, list of HistoryEntry with training loss per epoch)

    Raises:
        DivergenceError: a batch produced a non-finite loss
    """
    from training_eval import HistoryEntry

    config = config or MlpConfig()
    vectors, labels = _check_training_data(vectors, labels, class_count)
    init_seed, shuffle_seed = child_seeds(rng, 2)
    model = new_mlp(vectors.shape[1], class_count, config.hidden, np.random.default_rng(init_seed), class_names)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    adam = AdamState(learning_rate=config.learning_rate)
    history = []
    for epoch in tqdm(range(1, config.epochs + 1), desc="mlp epochs", disable=not config.progress):
        order = shuffle_rng.permutation(len(labels))
        total = 0.0
        for batch_number, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start:start + config.batch_size]
            try:
                with GradientTape() as tape:
                    loss = softmax_cross_entropy(
                        mlp(Tensor(vectors[rows]), model.params, "mlp", 3, final_activation=None),
                        labels[rows],
                    )
            except NumericError as e:
                raise DivergenceError(f"Non-finite values in the MLP forward pass: {e}", epoch, batch_number)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError("Non-finite MLP training loss", epoch, batch_number)
            adam_step(model.params, tape.backward(loss, model.params), adam)
            total += value * len(rows)
        history.append(HistoryEntry(epoch, total / len(labels), float("nan"), float("nan")))
        logger.debug("MLP epoch %d loss %.6f", epoch, history[-1].train_loss)
    model.fitted = True
    model.history = history
    logger.info("MLP trained for %d epochs, final loss %.5f", config.epochs, history[-1].train_loss)
    return model, history


def train_baseline(kind, vectors, labels, class_count, config, rng, class_names=()):
    """Dispatch on baseline kind; returns (model, history)."""
    if kind == ID3:
        return train_id3(vectors, labels, class_count, config, class_names), []
    if kind == RANDOM_FOREST:
        return train_random_forest(vectors, labels, class_count, config, rng, class_names), []
    if kind == MLP:
        return train_mlp(vectors, labels, class_count, config, rng, class_names)
    raise ConfigError(f"Unknown baseline kind '{kind}'")


def is_fitted(model):
    return bool(getattr(model, "fitted", False))


def predict_proba(model, matrix):
    if not is_fitted(model):
        raise NotFittedError(f"{type(model).__name__} has not been trained or loaded")
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return model.predict_proba(matrix)


def predict_baseline(model, vector):
    """
    (ClassLabel, probability vector) for one flow vector.

    Tree: leaf distribution; forest: vote proportions; MLP: softmax.
    Ties go to the lowest class index.
    """
    probabilities = predict_proba(model, vector)[0]
    index = int(np.argmax(probabilities))
    name = model.class_names[index] if model.class_names else str(index)
    return ClassLabel(index, name), probabilities


def _node_to_dict(node):
    if node.is_leaf:
        return {"distribution": [float(p) for p in node.distribution]}
    return {
        "feature": node.feature,
        "threshold": float(node.threshold),
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(data):
    if "distribution" in data:
        return TreeNode(distribution=np.array(data["distribution"], dtype=np.float64))
    return TreeNode(
        feature=int(data["feature"]),
        threshold=float(data["threshold"]),
        left=_node_from_dict(data["left"]),
        right=_node_from_dict(data["right"]),
    )


def save_baseline(model, path):
    body = {"class_count": model.class_count, "class_names": list(model.class_names)}
    if isinstance(model, DecisionTree):
        body["tree"] = _node_to_dict(model.root)
        return model_io.write_envelope(path, ID3, body)
    if isinstance(model, ForestModel):
        body["trees"] = [_node_to_dict(t.root) for t in model.trees]
        body["seeds"] = [str(s) for s in model.seeds]
        body["features_per_split"] = model.features_per_split
        return model_io.write_envelope(path, RANDOM_FOREST, body)
    if isinstance(model, MlpModel):
        body["feature_count"] = model.feature_count
        body["hidden"] = list(model.hidden)
        body["parameters"] = model_io.encode_arrays(model.params.to_arrays())
        return model_io.write_envelope(path, MLP, body)
    raise ModelFormatError(f"Cannot save model of type {type(model).__name__}")


def load_baseline(path):
    document = model_io.read_envelope(path)
    kind = document["kind"]
    class_count = int(document["class_count"])
    class_names = tuple(document["class_names"])
    if kind == ID3:
        return DecisionTree(_node_from_dict(document["tree"]), class_count, class_names)
    if kind == RANDOM_FOREST:
        trees = [DecisionTree(_node_from_dict(t), class_count) for t in document["trees"]]
        seeds = tuple(int(s) for s in document["seeds"])
        return ForestModel(trees, class_count, seeds, int(document["features_per_split"]), class_names)
    if kind == MLP:
        model = new_mlp(
            int(document["feature_count"]), class_count, tuple(document["hidden"]),
            np.random.default_rng(0), class_names,
        )
        model.params.assign(model_io.decode_arrays(document["parameters"]))
        model.fitted = True
        return model
    raise ModelFormatError(f"Model file {path} holds a '{kind}' model, not a baseline")
