"""
Dense float64 tensors with reverse-mode differentiation.

Operations executed inside an active GradientTape are recorded when any
input requires a gradient; `backward` replays the tape in exact reverse
order. Only the primitives the GNN and the MLP baseline need are provided.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from errors import NumericError, ShapeError, UsageError, ValidationError

logger = logging.getLogger(__name__)

_tape_stack = []


class Tensor:
    """A contiguous float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Operation(NamedTuple):
    name: str
    inputs: tuple
    output: Tensor
    vjp: object


class GradientTape:
    """
    Records operations executed inside its `with` block.

    Example:
        with GradientTape() as tape:
            loss = softmax_cross_entropy(logits, labels)
        grads = tape.backward(loss, params)
    """

    def __init__(self):
        self.operations = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.remove(self)
        return False

    def record(self, name, inputs, output, vjp):
        self.operations.append(_Operation(name, inputs, output, vjp))
        output.tape = self

    def backward(self, loss, params):
        """
        Reverse-mode gradients of a scalar loss.

        Returns:
            OrderedDict parameter name -> gradient array, in ParameterStore order;
            parameters the loss does not depend on get zero gradients
        """
        if loss.tape is not self:
            raise UsageError("backward() called on a value that was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.operations):
            upstream = grads.pop(id(op.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(op.inputs, op.vjp(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        return OrderedDict(
            (name, grads.get(id(tensor), np.zeros_like(tensor.data)))
            for name, tensor in params.items()
        )


def backward(loss, params):
    """Gradients of `loss` with respect to every parameter, in store order."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UsageError("backward() needs a loss produced by operations recorded on a GradientTape")
    return loss.tape.backward(loss, params)


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def _emit(name, data, inputs, vjp):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape.record(name, tuple(inputs), out, vjp)
    return out


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _require_2d(name, tensor):
    if tensor.data.ndim != 2:
        raise ShapeError(f"{name} expects a 2-D tensor, got shape {tensor.shape}")


def matmul(a, b):
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(x, bias):
    _require_2d("add_bias", x)
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"bias shape {bias.shape} does not match input {x.shape}")
    return _emit("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def one_minus(x):
    return _emit("one_minus", 1.0 - x.data, (x,), lambda g: (-g,))


def relu(x):
    active = x.data > 0
    return _emit("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x):
    s = expit(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    t = np.tanh(x.data)
    return _emit("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax_rows(values):
    shifted = values - values.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax(x):
    _require_2d("softmax", x)
    s = softmax_rows(x.data)
    return _emit("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def concat(tensors, axis=1):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum(sizes)[:-1]
    return _emit("concat", data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_columns(x, start, stop):
    _require_2d("slice_columns", x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_columns", x.data[:, start:stop], (x,), vjp)


def gather_rows(x, index):
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather_rows", x.data[index], (x,), vjp)


def segment_mean(messages, segment_ids, segment_count):
    """
    Row-wise mean of message rows per segment; empty segments yield zero rows.

    Rows are summed in the order given, so callers control the reduction order.
    """
    _require_2d("segment_mean", messages)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (messages.shape[0],):
        raise ShapeError(f"segment_ids length {ids.shape} does not match {messages.shape[0]} messages")
    if ids.size and (ids.min() < 0 or ids.max() >= segment_count):
        raise ValidationError(f"segment id out of range [0, {segment_count})")
    counts = np.bincount(ids, minlength=segment_count).astype(np.float64)
    sums = np.zeros((segment_count, messages.shape[1]))
    np.add.at(sums, ids, messages.data)
    divisor = np.maximum(counts, 1.0)[:, None]
    return _emit("segment_mean", sums / divisor, (messages,), lambda g: ((g / divisor)[ids],))


def sum_all(x):
    shape = x.shape
    return _emit("sum_all", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, np.asarray(g).item()),))


def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label], stabilized by max subtraction."""
    _require_2d("softmax_cross_entropy", logits)
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if batch == 0:
        raise ShapeError("softmax_cross_entropy needs at least one row")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValidationError(f"label out of range [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])

    def vjp(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (np.asarray(g).item() / batch),)

    return _emit("softmax_cross_entropy", np.array(loss), (logits,), vjp)


ACTIVATIONS = {"relu": relu, "softmax": softmax, None: lambda x: x, "none": lambda x: x}


def dense(input, weights, bias, activation=None):
    """Affine transform `input @ weights + bias` followed by an activation."""
    if activation not in ACTIVATIONS:
        raise ValidationError(f"Unknown activation '{activation}'")
    return ACTIVATIONS[activation](add_bias(matmul(input, weights), bias))


class GruParams(NamedTuple):
    """Gate matrices with columns ordered [update | reset | candidate]."""

    w_input: Tensor
    w_hidden: Tensor
    b_input: Tensor
    b_hidden: Tensor


def gru_cell(state, input, params):
    """
    One GRU step.

    z = sigmoid(x Wz + bz + h Uz + cz), r = sigmoid(x Wr + br + h Ur + cr),
    candidate = tanh(x Wn + bn + r * (h Un + cn)),
    new state = (1 - z) * h + z * candidate.
    """
    _require_2d("gru_cell", state)
    _require_2d("gru_cell", input)
    batch, n = state.shape
    expected = {
        "w_input": (input.shape[1], 3 * n),
        "w_hidden": (n, 3 * n),
        "b_input": (3 * n,),
        "b_hidden": (3 * n,),
    }
    for name, shape in expected.items():
        actual = getattr(params, name).shape
        if actual != shape:
            raise ShapeError(f"GRU {name} has shape {actual}, expected {shape}")
    if input.shape[0] != batch:
        raise ShapeError(f"GRU state {state.shape} and input {input.shape} batch sizes differ")

    gx = add_bias(matmul(input, params.w_input), params.b_input)
    gh = add_bias(matmul(state, params.w_hidden), params.b_hidden)
    update = sigmoid(add(slice_columns(gx, 0, n), slice_columns(gh, 0, n)))
    reset = sigmoid(add(slice_columns(gx, n, 2 * n), slice_columns(gh, n, 2 * n)))
    candidate = tanh(add(slice_columns(gx, 2 * n, 3 * n), mul(reset, slice_columns(gh, 2 * n, 3 * n))))
    return add(mul(one_minus(update), state), mul(update, candidate))


class ParameterStore:
    """Named learnable tensors; a name's prefix before the first dot is its group."""

    def __init__(self):
        self._tensors = OrderedDict()

    def add(self, name, value):
        if name in self._tensors:
            raise ValidationError(f"Duplicate parameter name '{name}'")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def groups(self):
        ordered = OrderedDict()
        for name in self._tensors:
            ordered.setdefault(name.split(".", 1)[0], []).append(name)
        return ordered

    def scalar_count(self):
        return sum(t.data.size for t in self._tensors.values())

    def to_arrays(self):
        return OrderedDict((name, t.data.copy()) for name, t in self._tensors.items())

    def copy(self):
        clone = ParameterStore()
        for name, tensor in self._tensors.items():
            clone.add(name, tensor.data.copy())
        return clone

    def assign(self, arrays):
        for name, value in arrays.items():
            target = self._tensors[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != target.shape:
                raise ShapeError(f"Parameter '{name}' has shape {target.shape}, got {value.shape}")
            target.data = value.copy()

    def gru(self, group):
        return GruParams(
            self[f"{group}.w_input"], self[f"{group}.w_hidden"],
            self[f"{group}.b_input"], self[f"{group}.b_hidden"],
        )


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_dense_layers(store, group, widths, rng):
    """Register weights `group.w{i}` and zero biases `group.b{i}` for consecutive widths."""
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"{group}.w{i}", glorot_uniform(rng, fan_in, fan_out))
        store.add(f"{group}.b{i}", np.zeros(fan_out))


def add_gru(store, group, input_size, state_size, rng):
    store.add(f"{group}.w_input", glorot_uniform(rng, input_size, 3 * state_size))
    store.add(f"{group}.w_hidden", glorot_uniform(rng, state_size, 3 * state_size))
    store.add(f"{group}.b_input", np.zeros(3 * state_size))
    store.add(f"{group}.b_hidden", np.zeros(3 * state_size))


def mlp(x, store, group, layers, final_activation="relu"):
    """Apply `layers` dense layers of a group; ReLU between them."""
    for i in range(layers):
        activation = "relu" if i < layers - 1 else final_activation
        x = dense(x, store[f"{group}.w{i}"], store[f"{group}.b{i}"], activation)
    return x


@dataclass
class GradCheckResult:
    max_error: float
    parameter: str
    index: int
    per_group: dict = field(default_factory=dict)
    checked: int = 0


def grad_check(forward_fn, params, step=1e-5, samples_per_group=200, rng=None, atol=1e-5):
    """
    Compare taped gradients with central finite differences.

    Args:
        forward_fn: Deterministic zero-argument callable returning a scalar Tensor
        params: ParameterStore the forward reads from
        step: Finite-difference step
        samples_per_group: Scalars checked per group (all when the group is smaller)
        rng: Generator used to pick the sampled scalars
        atol: Floor of the relative-error denominator, for near-zero gradients

    Returns:
        GradCheckResult with the worst relative error and where it occurred
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with GradientTape():
        loss = forward_fn()
    analytic = backward(loss, params)

    worst = GradCheckResult(0.0, "", -1)
    for group, names in params.groups().items():
        slots = [(name, i) for name in names for i in range(params[name].data.size)]
        if len(slots) > samples_per_group:
            picks = np.sort(rng.choice(len(slots), size=samples_per_group, replace=False))
            slots = [slots[i] for i in picks]
        group_worst = 0.0
        for name, i in slots:
            flat = params[name].data.reshape(-1)
            original = flat[i]
            flat[i] = original + step
            plus = forward_fn().item()
            flat[i] = original - step
            minus = forward_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic[name].reshape(-1)[i])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
            group_worst = max(group_worst, error)
            worst.checked += 1
            if error > worst.max_error:
                worst.max_error, worst.parameter, worst.index = error, name, i
        worst.per_group[group] = group_worst
    logger.debug("Gradient check: worst %.3e at %s[%d]", worst.max_error, worst.parameter, worst.index)
    return worst


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """
    One Adam update with bias correction, applied to `params` in place.

    Returns:
        (params, state)
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, tensor in params.items():
        grad = grads[name]
        if grad.shape != tensor.shape:
            raise ShapeError(f"Gradient of '{name}' has shape {grad.shape}, expected {tensor.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        tensor.data = tensor.data - state.learning_rate * (m / correction1) / (
            np.sqrt(v / correction2) + state.epsilon
        )
    return params, state
