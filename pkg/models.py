"""
Models - desk-scale differentiable classifiers behind one gradient oracle
MLPs with hand-written backprop, weighted-logit ensembles, analytic oracles,
SGD training and a self-describing binary checkpoint format
"""

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_core import DTYPE, LabError, Tensor, check_finite


class ModelError(LabError):
    """Invalid model construction, input shape or label"""


class TrainingDivergedError(ModelError):
    def __init__(self, epoch: int):
        super().__init__(f"Training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


class CheckpointError(LabError):
    """Checkpoint could not be read or written"""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version"""


class CheckpointCorruptError(CheckpointError):
    """Truncated or otherwise inconsistent checkpoint payload"""


class Activation(Enum):
    RELU = "relu"
    IDENTITY = "identity"


_ACTIVATION_CODES = {Activation.IDENTITY: 0, Activation.RELU: 1}
_ACTIVATION_BY_CODE = {v: k for k, v in _ACTIVATION_CODES.items()}


@dataclass
class LabeledExample:
    features: Tensor
    label: int


def _noop_log(msg: str):
    pass


class GradientOracle(ABC):
    """
    Anything an attack can query: logits, a loss and its input gradient.
    Subclasses provide logits and a vector-Jacobian product of the logits;
    the softmax cross-entropy loss and its gradient are derived from those.
    """

    input_shape: Tuple[int, ...]
    num_classes: int

    @abstractmethod
    def logits(self, x: Tensor) -> Tensor:
        ...

    @abstractmethod
    def logits_vjp(self, x: Tensor, cotangent: Tensor) -> Tensor:
        """Return cotangent^T * d(logits)/dx, shaped like x"""

    def check_input(self, x: Tensor) -> Tensor:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape != tuple(self.input_shape):
            raise ModelError(f"Input shape {x.shape} does not match model input {tuple(self.input_shape)}")
        return x

    def check_label(self, label: int) -> int:
        if not isinstance(label, (int, np.integer)) or not 0 <= int(label) < self.num_classes:
            raise ModelError(f"Invalid label {label!r} for {self.num_classes} classes")
        return int(label)

    def loss(self, x: Tensor, label: int) -> float:
        return softmax_cross_entropy(self.logits(x), self.check_label(label))[0]

    def loss_and_input_grad(self, x: Tensor, label: int) -> Tuple[float, Tensor]:
        return cross_entropy_loss_and_input_grad(self, x, label)


def softmax(z: Tensor) -> Tensor:
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def softmax_cross_entropy(z: Tensor, label: int) -> Tuple[float, Tensor]:
    """Loss -log softmax(z)[label] and its gradient softmax(z) - onehot(label)"""
    shifted = z - np.max(z)
    log_norm = np.log(np.sum(np.exp(shifted)))
    loss = max(float(log_norm - shifted[label]), 0.0)
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_loss_and_input_grad(oracle: GradientOracle, x: Tensor,
                                      label: int) -> Tuple[float, Tensor]:
    label = oracle.check_label(label)
    x = oracle.check_input(x)
    loss, dz = softmax_cross_entropy(oracle.logits(x), label)
    grad = oracle.logits_vjp(x, dz)
    check_finite(grad, "input gradient")
    return loss, grad


def predict(oracle: GradientOracle, x: Tensor) -> int:
    """Argmax of the logits; np.argmax breaks ties towards the lowest index"""
    return int(np.argmax(oracle.logits(x)))


def accuracy(oracle: GradientOracle, data: Sequence[LabeledExample]) -> float:
    if not data:
        raise ModelError("accuracy of an empty dataset is undefined")
    correct = sum(1 for ex in data if predict(oracle, ex.features) == ex.label)
    return correct / len(data)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: Activation = Activation.RELU

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class MlpModel(GradientOracle):
    """Feedforward network; the final layer emits raw logits"""

    def __init__(self, layers: List[DenseLayer], input_shape: Optional[Sequence[int]] = None):
        if not layers:
            raise ModelError("An MLP needs at least one layer")
        for k, layer in enumerate(layers):
            layer.weight = np.array(layer.weight, dtype=DTYPE)
            layer.bias = np.array(layer.bias, dtype=DTYPE)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ModelError(f"Layer {k}: weight {layer.weight.shape} and bias {layer.bias.shape} disagree")
            if k > 0 and layer.in_dim != layers[k - 1].out_dim:
                raise ModelError(f"Layer {k} expects {layer.in_dim} inputs but layer {k - 1} emits {layers[k - 1].out_dim}")
            check_finite(layer.weight, f"layer {k} weight")
            check_finite(layer.bias, f"layer {k} bias")
        self.layers = layers
        if input_shape is None:
            input_shape = (layers[0].in_dim,)
        self.input_shape = tuple(int(s) for s in input_shape)
        if int(np.prod(self.input_shape)) != layers[0].in_dim:
            raise ModelError(f"Input shape {self.input_shape} does not flatten to {layers[0].in_dim}")
        self.num_classes = layers[-1].out_dim

    @classmethod
    def initialize(cls, input_shape: Sequence[int], hidden: Sequence[int],
                   num_classes: int, seed: int) -> "MlpModel":
        """He-initialized ReLU MLP with an identity output layer"""
        rng = np.random.default_rng(seed)
        dims = [int(np.prod(input_shape))] + [int(h) for h in hidden] + [int(num_classes)]
        layers = []
        for k in range(len(dims) - 1):
            fan_in, fan_out = dims[k], dims[k + 1]
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            last = k == len(dims) - 2
            layers.append(DenseLayer(weight, np.zeros(fan_out),
                                     Activation.IDENTITY if last else Activation.RELU))
        return cls(layers, input_shape)

    def copy(self) -> "MlpModel":
        return MlpModel([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                        self.input_shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpModel) or other.input_shape != self.input_shape:
            return False
        if len(other.layers) != len(self.layers):
            return False
        return all(a.activation == b.activation
                   and np.array_equal(a.weight, b.weight)
                   and np.array_equal(a.bias, b.bias)
                   for a, b in zip(self.layers, other.layers))

    def _forward(self, x: Tensor) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        h = self.check_input(x).reshape(-1)
        activations, preacts = [h], []
        for layer in self.layers:
            z = layer.weight @ h + layer.bias
            preacts.append(z)
            h = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
            activations.append(h)
        return activations, preacts

    def _backward(self, activations, preacts, cotangent):
        """Backprop a logit cotangent; returns (per-layer (dW, db), input gradient)"""
        delta = np.asarray(cotangent, dtype=DTYPE)
        param_grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation is Activation.RELU:
                delta = delta * (preacts[k] > 0)
            param_grads[k] = (np.outer(delta, activations[k]), delta.copy())
            delta = layer.weight.T @ delta
        return param_grads, delta.reshape(self.input_shape)

    def logits(self, x: Tensor) -> Tensor:
        activations, _ = self._forward(x)
        return check_finite(activations[-1], "logits")

    def logits_vjp(self, x: Tensor, cotangent: Tensor) -> Tensor:
        activations, preacts = self._forward(x)
        _, grad = self._backward(activations, preacts, cotangent)
        return grad

    def loss_and_param_grads(self, x: Tensor, label: int):
        label = self.check_label(label)
        activations, preacts = self._forward(x)
        loss, dz = softmax_cross_entropy(activations[-1], label)
        param_grads, _ = self._backward(activations, preacts, dz)
        return loss, param_grads


def mlp_forward(model: MlpModel, x: Tensor) -> Tensor:
    return model.logits(x)


class EnsembleModel(GradientOracle):
    """Virtual model whose logits are the weighted sum of its members' logits"""

    def __init__(self, members: Sequence[GradientOracle], weights: Optional[Sequence[float]] = None):
        members = list(members)
        if not members:
            raise ModelError("An ensemble needs at least one member")
        if weights is None:
            weights = [1.0 / len(members)] * len(members)
        weights = np.asarray(weights, dtype=DTYPE)
        if weights.shape != (len(members),):
            raise ModelError(f"{len(members)} members but {weights.size} weights")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)) or weights.sum() <= 0:
            raise ModelError(f"Ensemble weights must be finite, non-negative and not all zero: {weights.tolist()}")
        first = members[0]
        for m in members[1:]:
            if tuple(m.input_shape) != tuple(first.input_shape) or m.num_classes != first.num_classes:
                raise ModelError("Ensemble members must share input shape and class count")
        self.members = members
        self.weights = weights / weights.sum()
        self.input_shape = tuple(first.input_shape)
        self.num_classes = first.num_classes

    def logits(self, x: Tensor) -> Tensor:
        fused = np.zeros(self.num_classes, dtype=DTYPE)
        for w, member in zip(self.weights, self.members):
            fused += w * member.logits(x)
        return fused

    def logits_vjp(self, x: Tensor, cotangent: Tensor) -> Tensor:
        grad = np.zeros(self.input_shape, dtype=DTYPE)
        for w, member in zip(self.weights, self.members):
            if w != 0.0:
                grad += w * member.logits_vjp(x, cotangent)
        return grad


def ensemble_logits(ens: EnsembleModel, x: Tensor) -> Tensor:
    return ens.logits(x)


class FunctionOracle(GradientOracle):
    """
    Oracle over an analytic loss J(x) with a known gradient. The label is
    ignored; logits default to zeros (so predict() returns class 0) unless a
    logits function is supplied.
    """

    def __init__(self, loss_fn: Callable[[Tensor], float], grad_fn: Callable[[Tensor], Tensor],
                 input_shape: Sequence[int], num_classes: int = 2,
                 logits_fn: Optional[Callable[[Tensor], Tensor]] = None):
        self.loss_fn = loss_fn
        self.grad_fn = grad_fn
        self.logits_fn = logits_fn
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = num_classes
        self.gradient_calls = 0

    def logits(self, x: Tensor) -> Tensor:
        if self.logits_fn is None:
            return np.zeros(self.num_classes, dtype=DTYPE)
        return np.asarray(self.logits_fn(self.check_input(x)), dtype=DTYPE)

    def logits_vjp(self, x: Tensor, cotangent: Tensor) -> Tensor:
        raise ModelError("FunctionOracle exposes a loss gradient, not a logit Jacobian")

    def loss(self, x: Tensor, label: int) -> float:
        return float(self.loss_fn(self.check_input(x)))

    def loss_and_input_grad(self, x: Tensor, label: int) -> Tuple[float, Tensor]:
        x = self.check_input(x)
        self.gradient_calls += 1
        return float(self.loss_fn(x)), np.asarray(self.grad_fn(x), dtype=DTYPE).reshape(self.input_shape)


def train_sgd(model: MlpModel, data: Sequence[LabeledExample], epochs: int, lr: float,
              seed: int, debug_log: Callable[[str], None] = _noop_log) -> MlpModel:
    """Plain per-example SGD on softmax cross-entropy; returns a trained copy"""
    if not data:
        raise ModelError("Cannot train on an empty dataset")
    if lr <= 0:
        raise ModelError(f"Learning rate must be positive, got {lr}")
    if epochs < 0:
        raise ModelError(f"Epoch count must be >= 0, got {epochs}")
    trained = model.copy()
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        total = 0.0
        for i in rng.permutation(len(data)):
            ex = data[i]
            loss, grads = trained.loss_and_param_grads(ex.features, ex.label)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            for layer, (d_weight, d_bias) in zip(trained.layers, grads):
                layer.weight -= lr * d_weight
                layer.bias -= lr * d_bias
            total += loss
        if not np.isfinite(total) or not all(np.all(np.isfinite(l.weight)) for l in trained.layers):
            raise TrainingDivergedError(epoch)
        debug_log(f"train_sgd epoch {epoch}/{epochs}: mean loss {total / len(data):.6f}")
    return trained


# Checkpoint layout (little-endian):
#   magic "ADVMLP" | version u8 | input rank u8 | input dims u32* | layer count u32
#   per layer: out u32, in u32, activation u8
#   per layer: weight f8[out*in] (row-major), bias f8[out]
CHECKPOINT_MAGIC = b"ADVMLP"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: MlpModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<BB", CHECKPOINT_VERSION, len(model.input_shape))]
    parts.append(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    parts.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim, _ACTIVATION_CODES[layer.activation]))
    for layer in model.layers:
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise CheckpointCorruptError(f"Checkpoint truncated at byte {self.offset} (needed {size} more)")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def floats(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.offset + size > len(self.data):
            raise CheckpointCorruptError(f"Checkpoint truncated at byte {self.offset} (needed {size} more)")
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.offset).astype(DTYPE)
        self.offset += size
        return arr


def model_from_checkpoint_bytes(data: bytes) -> MlpModel:
    head = data[:len(CHECKPOINT_MAGIC)]
    if head != CHECKPOINT_MAGIC:
        if len(data) < len(CHECKPOINT_MAGIC) and CHECKPOINT_MAGIC.startswith(head):
            raise CheckpointCorruptError("Checkpoint truncated inside the magic string")
        raise CheckpointVersionError(f"Bad checkpoint magic {head!r}, expected {CHECKPOINT_MAGIC!r}")
    reader = _Reader(data)
    reader.offset = len(CHECKPOINT_MAGIC)
    version, rank = reader.unpack("<BB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"Unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    input_shape = reader.unpack(f"<{rank}I") if rank else ()
    (n_layers,) = reader.unpack("<I")
    specs = [reader.unpack("<IIB") for _ in range(n_layers)]
    layers = []
    for out_dim, in_dim, code in specs:
        if code not in _ACTIVATION_BY_CODE:
            raise CheckpointCorruptError(f"Unknown activation code {code}")
        weight = reader.floats(out_dim * in_dim).reshape(out_dim, in_dim)
        bias = reader.floats(out_dim)
        layers.append(DenseLayer(weight, bias, _ACTIVATION_BY_CODE[code]))
    if reader.offset != len(data):
        raise CheckpointCorruptError(f"{len(data) - reader.offset} trailing bytes after checkpoint payload")
    try:
        return MlpModel(layers, input_shape or None)
    except LabError as e:
        raise CheckpointCorruptError(f"Checkpoint describes an invalid model: {e}") from e


def save_checkpoint(model: MlpModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(checkpoint_bytes(model))
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Union[str, Path]) -> MlpModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return model_from_checkpoint_bytes(data)
