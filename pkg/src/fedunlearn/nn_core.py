"""Minimal dense feed-forward network with manual backpropagation.

The network is deliberately tiny: dense layers, ReLU hidden activations,
and a temperature softmax output. Parameters live in a single flat
float64 vector (:class:`ParameterVector`) so that federated aggregation,
history subtraction, and serialization are exact elementwise arithmetic.

All functions here are pure: they never mutate their inputs and are safe
to call concurrently. Accumulations run in a fixed left-to-right order so
identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
    VersionError,
)

PROB_FLOOR = 1e-12  # clamp before log, keeps losses finite

LOSS_HARD = "hard"
LOSS_DISTILL = "distill"


@dataclass(frozen=True)
class LayerShape:
    """Shape of one dense layer: ``rows`` inputs, ``cols`` outputs."""

    rows: int
    cols: int
    has_bias: bool = True

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.cols if self.has_bias else 0)


def manifest_size(shapes: Sequence[LayerShape]) -> int:
    return sum(s.size for s in shapes)


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 model parameters plus their layer-shape manifest.

    ``values`` stores, per layer, the weight matrix row-major followed by
    the bias vector. Arithmetic helpers return new vectors; nothing here
    mutates in place.
    """

    values: np.ndarray
    shapes: tuple[LayerShape, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if values.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        expected = manifest_size(self.shapes)
        if values.size != expected:
            raise ShapeError(
                f"manifest expects {expected} values, got {values.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def same_manifest(self, other: "ParameterVector") -> bool:
        return self.shapes == other.shapes

    def add(self, other: "ParameterVector") -> "ParameterVector":
        self._check(other)
        return ParameterVector(self.values + other.values, self.shapes)

    def sub(self, other: "ParameterVector") -> "ParameterVector":
        self._check(other)
        return ParameterVector(self.values - other.values, self.shapes)

    def scale(self, factor: float) -> "ParameterVector":
        return ParameterVector(self.values * float(factor), self.shapes)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.shapes)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros_like(self.values), self.shapes)

    def layer(self, index: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Weight matrix and bias of layer ``index`` as read-only views."""
        offset = sum(s.size for s in self.shapes[:index])
        shape = self.shapes[index]
        w = self.values[offset : offset + shape.rows * shape.cols]
        w = w.reshape(shape.rows, shape.cols)
        b = None
        if shape.has_bias:
            start = offset + shape.rows * shape.cols
            b = self.values[start : start + shape.cols]
        return w, b

    def _check(self, other: "ParameterVector") -> None:
        if not self.same_manifest(other):
            raise ShapeError("parameter vectors have different manifests")


@dataclass(frozen=True)
class Batch:
    """A training/evaluation batch.

    ``hard_labels`` are class indices; ``soft_labels`` are per-row
    probability vectors (each row must sum to 1 within 1e-6). At least one
    must be present before the batch is used as a training target.
    """

    inputs: np.ndarray
    hard_labels: Optional[np.ndarray] = None
    soft_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise ShapeError("batch inputs must be a 2-D matrix")
        object.__setattr__(self, "inputs", inputs)
        if self.hard_labels is not None:
            labels = np.asarray(self.hard_labels, dtype=np.int64)
            if labels.shape != (inputs.shape[0],):
                raise ShapeError("hard_labels must have one entry per row")
            object.__setattr__(self, "hard_labels", labels)
        if self.soft_labels is not None:
            soft = np.asarray(self.soft_labels, dtype=np.float64)
            if soft.ndim != 2 or soft.shape[0] != inputs.shape[0]:
                raise ShapeError("soft_labels must have one row per input")
            if np.any(soft < 0):
                raise DomainError("soft label rows must be nonnegative")
            sums = soft.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise DomainError("soft label rows must sum to 1 within 1e-6")
            object.__setattr__(self, "soft_labels", soft)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class ForwardCache:
    """Pre-activations and activations retained for backpropagation."""

    inputs: np.ndarray
    pre_activations: tuple[np.ndarray, ...]  # z per layer, last = logits
    activations: tuple[np.ndarray, ...]  # relu(z) per hidden layer
    shapes: tuple[LayerShape, ...]

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]


def init_model(arch: Sequence[int], seed: int) -> ParameterVector:
    """Seeded model initialization.

    Weights are uniform in ``[-1/sqrt(fan_in), +1/sqrt(fan_in)]``, biases
    zero. The draw order is fixed (layer by layer), so identical
    ``(arch, seed)`` produce bitwise-identical vectors.
    """
    arch = [int(a) for a in arch]
    if len(arch) < 2:
        raise ConfigurationError("arch needs at least an input and output size")
    if any(a < 1 for a in arch):
        raise ConfigurationError("all layer sizes must be >= 1")
    shapes = tuple(
        LayerShape(rows=arch[i], cols=arch[i + 1]) for i in range(len(arch) - 1)
    )
    rng = np.random.default_rng(seed)
    chunks = []
    for shape in shapes:
        bound = 1.0 / np.sqrt(shape.rows)
        w = rng.uniform(-bound, bound, size=shape.rows * shape.cols)
        chunks.append(w)
        chunks.append(np.zeros(shape.cols))
    return ParameterVector(np.concatenate(chunks), shapes)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction for stability.

    Computed as ``softmax(logits / T)`` so the scaling identity
    ``softmax(z, T) == softmax(z / T, 1)`` holds bitwise. Accepts a single
    logit vector or a matrix of row vectors.
    """
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax requires finite logits")
    scaled = z / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def forward(
    model: ParameterVector, batch: Batch, temperature: float = 1.0
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network; hidden layers use ReLU, the output a temperature
    softmax. Returns class probabilities and the cache backprop needs."""
    x = batch.inputs
    if x.shape[1] != model.shapes[0].rows:
        raise ShapeError(
            f"input dim {x.shape[1]} != model input dim {model.shapes[0].rows}"
        )
    pre, act = [], []
    a = x
    last = len(model.shapes) - 1
    for i in range(len(model.shapes)):
        w, b = model.layer(i)
        z = a @ w
        if b is not None:
            z = z + b
        pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            act.append(a)
    probs = softmax(pre[-1], temperature)
    cache = ForwardCache(
        inputs=x,
        pre_activations=tuple(pre),
        activations=tuple(act),
        shapes=model.shapes,
    )
    return probs, cache


def loss_hard(probabilities: np.ndarray, hard_labels: np.ndarray) -> float:
    """Mean cross-entropy against integer class labels."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(hard_labels, dtype=np.int64)
    num_classes = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def loss_distill(
    student_logits: np.ndarray, teacher_probs: np.ndarray, temperature: float
) -> float:
    """Distillation loss: cross-entropy of the student's tempered softmax
    against teacher soft targets, scaled by T^2.

    The T^2 factor keeps gradient magnitudes comparable to the hard loss
    when the two are mixed. Minimized exactly when the distributions
    match, where the value equals T^2 times the teacher entropy.
    """
    logits = np.asarray(student_logits, dtype=np.float64)
    teacher = np.asarray(teacher_probs, dtype=np.float64)
    if logits.shape != teacher.shape:
        raise ShapeError(
            f"student logits {logits.shape} vs teacher probs {teacher.shape}"
        )
    student = softmax(logits, temperature)
    ce = -np.sum(teacher * np.log(np.maximum(student, PROB_FLOOR)), axis=-1)
    return float(temperature * temperature * np.mean(ce))


def _check_cache(model: ParameterVector, cache: ForwardCache) -> None:
    if cache.shapes != model.shapes:
        raise StateError("forward cache does not match this model")
    if len(cache.pre_activations) != len(model.shapes):
        raise StateError("forward cache is incomplete")


def backward(
    model: ParameterVector,
    cache: ForwardCache,
    loss_kind: str,
    targets: np.ndarray,
    temperature: float = 1.0,
) -> ParameterVector:
    """Analytic gradient of the selected loss w.r.t. every parameter.

    ``targets`` is a label vector for ``"hard"`` or a teacher probability
    matrix for ``"distill"``. The returned vector shares the model's
    manifest. ReLU's derivative at exactly zero is taken as zero.
    """
    _check_cache(model, cache)
    logits = cache.logits
    batch_size = logits.shape[0]
    probs = softmax(logits, temperature)

    if loss_kind == LOSS_HARD:
        labels = np.asarray(targets, dtype=np.int64)
        if labels.shape != (batch_size,):
            raise ShapeError("hard targets must have one label per row")
        if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
            raise DomainError("label out of range")
        onehot = np.zeros_like(probs)
        onehot[np.arange(batch_size), labels] = 1.0
        delta = (probs - onehot) / (batch_size * temperature)
    elif loss_kind == LOSS_DISTILL:
        teacher = np.asarray(targets, dtype=np.float64)
        if teacher.shape != probs.shape:
            raise ShapeError("teacher probs must match logits shape")
        # d/dz of T^2 * CE(teacher, softmax(z/T)) = T * (student - teacher)
        delta = temperature * (probs - teacher) / batch_size
    else:
        raise DomainError(f"unknown loss kind: {loss_kind!r}")

    grads: list[np.ndarray] = [np.empty(0)] * len(model.shapes)
    for i in range(len(model.shapes) - 1, -1, -1):
        a_prev = cache.inputs if i == 0 else cache.activations[i - 1]
        dw = a_prev.T @ delta
        db = delta.sum(axis=0)
        grads[i] = np.concatenate([dw.reshape(-1), db])
        if i > 0:
            w, _ = model.layer(i)
            delta = (delta @ w.T) * (cache.pre_activations[i - 1] > 0)
    return ParameterVector(np.concatenate(grads), model.shapes)


def sgd_step(
    model: ParameterVector, gradient: ParameterVector, lr: float
) -> ParameterVector:
    """One exact SGD step: ``model - lr * gradient`` elementwise."""
    if not model.same_manifest(gradient):
        raise ShapeError("gradient manifest does not match model")
    return ParameterVector(model.values - lr * gradient.values, model.shapes)


def batch_loss(
    model: ParameterVector,
    batch: Batch,
    loss_kind: str,
    temperature: float = 1.0,
) -> float:
    """Loss of ``model`` on ``batch`` using the batch's own targets."""
    probs, cache = forward(model, batch, temperature)
    if loss_kind == LOSS_HARD:
        if batch.hard_labels is None:
            raise DomainError("batch has no hard labels")
        return loss_hard(probs, batch.hard_labels)
    if loss_kind == LOSS_DISTILL:
        if batch.soft_labels is None:
            raise DomainError("batch has no soft labels")
        return loss_distill(cache.logits, batch.soft_labels, temperature)
    raise DomainError(f"unknown loss kind: {loss_kind!r}")


def finite_diff_grad(
    model: ParameterVector,
    batch: Batch,
    loss_kind: str,
    temperature: float = 1.0,
    eps: float = 1e-5,
) -> ParameterVector:
    """Central-difference gradient estimate, one parameter at a time.

    This is the verification oracle for :func:`backward`; it shares no
    code with the analytic path beyond the forward pass.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    base = model.values
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        up = batch_loss(ParameterVector(bumped, model.shapes), batch, loss_kind, temperature)
        bumped[i] = base[i] - eps
        down = batch_loss(ParameterVector(bumped, model.shapes), batch, loss_kind, temperature)
        grad[i] = (up - down) / (2.0 * eps)
    return ParameterVector(grad, model.shapes)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FUPV"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ParameterVector, path) -> None:
    """Write a versioned binary checkpoint (magic, version, manifest,
    little-endian float64 payload in manifest order)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(model.shapes)))
        for shape in model.shapes:
            fh.write(struct.pack("<IIB", shape.rows, shape.cols, int(shape.has_bias)))
        fh.write(model.values.astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", offset=fh.tell())
    return data


def load_checkpoint(path) -> ParameterVector:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionError(
                f"unsupported checkpoint version {version}", offset=4
            )
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
        shapes = []
        for i in range(n_layers):
            rows, cols, has_bias = struct.unpack(
                "<IIB", _read_exact(fh, 9, f"layer {i} manifest")
            )
            shapes.append(LayerShape(rows, cols, bool(has_bias)))
        shapes = tuple(shapes)
        count = manifest_size(shapes)
        payload = _read_exact(fh, count * 8, "parameter payload")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after payload", offset=fh.tell() - 1)
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParameterVector(values, shapes)
