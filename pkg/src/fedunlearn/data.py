"""Datasets, client partitioning, and backdoor poisoning.

Examples carry two provenance markers: the dataset-level tag (clean /
poisoned / distill-pool / test) and a per-example ``origin`` string that
records which split the example landed in. The origin is what the
unlearning module's data-hygiene check inspects, and it travels with the
example through trigger application and CSV dumps.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, FormatError
from .seeds import rng_for

PROVENANCE_CLEAN = "clean"
PROVENANCE_POISONED = "poisoned"
PROVENANCE_POOL = "distill-pool"
PROVENANCE_TEST = "test"

ORIGIN_POOL = "distill-pool"
ORIGIN_TEST = "test"


def shard_origin(client_id: int) -> str:
    return f"shard:{client_id}"


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    uid: int
    origin: str = "unassigned"


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    num_classes: int
    feature_dim: int
    provenance: str = PROVENANCE_CLEAN

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            if not 0 <= ex.label < self.num_classes:
                raise ConfigurationError(
                    f"label {ex.label} outside [0, {self.num_classes})"
                )
            if ex.features.shape != (self.feature_dim,):
                raise ConfigurationError(
                    f"feature vector of length {ex.features.shape} != {self.feature_dim}"
                )

    def __len__(self) -> int:
        return len(self.examples)

    def features_matrix(self) -> np.ndarray:
        return np.stack([ex.features for ex in self.examples])

    def labels_array(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def uids(self) -> frozenset[int]:
        return frozenset(ex.uid for ex in self.examples)


@dataclass(frozen=True)
class BackdoorSpec:
    """Trigger pattern plus the source-to-target class mapping."""

    trigger_indices: tuple[int, ...]
    trigger_values: tuple[float, ...]
    source_class: int
    target_class: int
    poison_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "trigger_indices", tuple(int(i) for i in self.trigger_indices))
        object.__setattr__(self, "trigger_values", tuple(float(v) for v in self.trigger_values))
        if len(self.trigger_indices) != len(self.trigger_values):
            raise ConfigurationError("trigger indices and values differ in length")
        if self.source_class == self.target_class:
            raise ConfigurationError("source_class must differ from target_class")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigurationError("poison_fraction must lie in [0, 1]")

    def validate_for(self, feature_dim: int) -> None:
        for idx in self.trigger_indices:
            if not 0 <= idx < feature_dim:
                raise ConfigurationError(
                    f"trigger index {idx} outside feature dim {feature_dim}"
                )


@dataclass(frozen=True)
class Partition:
    client_shards: tuple[Dataset, ...]
    distill_pool: Dataset
    test_set: Dataset


def gen_synthetic(
    num_classes: int,
    feature_dim: int,
    per_class: int,
    spread: float,
    seed: int,
) -> Dataset:
    """Gaussian class clusters around seeded random centers.

    Deterministic under all arguments; labels come out balanced with
    exactly ``per_class`` examples per class.
    """
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1")
    if feature_dim < 1:
        raise ConfigurationError("feature_dim must be >= 1")
    if spread <= 0:
        raise ConfigurationError("spread must be positive")
    rng = rng_for(seed, "synthetic")
    centers = rng.normal(0.0, 1.0, size=(num_classes, feature_dim))
    examples = []
    uid = 0
    for label in range(num_classes):
        noise = rng.normal(0.0, spread, size=(per_class, feature_dim))
        for row in noise:
            examples.append(
                Example(features=centers[label] + row, label=label, uid=uid)
            )
            uid += 1
    return Dataset(tuple(examples), num_classes, feature_dim, PROVENANCE_CLEAN)


def partition(dataset: Dataset, n_clients: int, seed: int) -> Partition:
    """Seeded shuffle, then split into ``n_clients`` equal shards, one
    shard-sized distillation pool, and the remainder as the test set."""
    if n_clients < 1:
        raise ConfigurationError("need at least one client")
    shard_size = len(dataset) // (n_clients + 2)
    if shard_size < 1:
        raise ConfigurationError(
            f"{len(dataset)} examples cannot cover {n_clients} shards plus pool and test"
        )
    rng = rng_for(seed, "partition")
    order = rng.permutation(len(dataset))

    def take(indices, origin, provenance):
        items = tuple(
            replace(dataset.examples[i], origin=origin) for i in indices
        )
        return Dataset(items, dataset.num_classes, dataset.feature_dim, provenance)

    shards = []
    cursor = 0
    for client_id in range(n_clients):
        shards.append(
            take(order[cursor : cursor + shard_size], shard_origin(client_id), PROVENANCE_CLEAN)
        )
        cursor += shard_size
    pool = take(order[cursor : cursor + shard_size], ORIGIN_POOL, PROVENANCE_POOL)
    cursor += shard_size
    test = take(order[cursor:], ORIGIN_TEST, PROVENANCE_TEST)
    return Partition(tuple(shards), pool, test)


def apply_trigger(example: Example, spec: BackdoorSpec) -> Example:
    """Overwrite the trigger positions; everything else (label included)
    stays untouched. Idempotent."""
    features = example.features.copy()
    for idx, value in zip(spec.trigger_indices, spec.trigger_values):
        if not 0 <= idx < features.shape[0]:
            raise ConfigurationError(
                f"trigger index {idx} outside feature dim {features.shape[0]}"
            )
        features[idx] = value
    return replace(example, features=features)


def poison_shard(shard: Dataset, spec: BackdoorSpec, seed: int = 0) -> Dataset:
    """Backdoor a shard: a seeded ``poison_fraction`` of its source-class
    examples get the trigger and their label rewritten to the target.

    Selection count is ``floor(fraction * count)``; non-source examples
    are preserved exactly. The result carries poisoned provenance.
    """
    spec.validate_for(shard.feature_dim)
    source_positions = [
        i for i, ex in enumerate(shard.examples) if ex.label == spec.source_class
    ]
    if not source_positions:
        raise ConfigurationError(
            f"shard has no examples of source class {spec.source_class}"
        )
    n_poison = int(np.floor(spec.poison_fraction * len(source_positions)))
    rng = rng_for(seed, "poison")
    chosen = set(
        rng.choice(source_positions, size=n_poison, replace=False).tolist()
        if n_poison
        else []
    )
    poisoned = []
    for i, ex in enumerate(shard.examples):
        if i in chosen:
            triggered = apply_trigger(ex, spec)
            poisoned.append(replace(triggered, label=spec.target_class))
        else:
            poisoned.append(ex)
    return Dataset(tuple(poisoned), shard.num_classes, shard.feature_dim, PROVENANCE_POISONED)


def build_attack_set(test_set: Dataset, spec: BackdoorSpec) -> Dataset:
    """All source-class test examples with the trigger stamped on.

    Labels stay original; the attack metric compares predictions against
    the target class separately.
    """
    spec.validate_for(test_set.feature_dim)
    sources = [ex for ex in test_set.examples if ex.label == spec.source_class]
    if not sources:
        raise ConfigurationError(
            f"test set has no examples of source class {spec.source_class}"
        )
    triggered = tuple(apply_trigger(ex, spec) for ex in sources)
    return Dataset(triggered, test_set.num_classes, test_set.feature_dim, PROVENANCE_POISONED)


# ---------------------------------------------------------------------------
# IDX image/label files (the classic big-endian handwritten-digit layout)
# ---------------------------------------------------------------------------

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


def _idx_open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _idx_read(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated IDX file while reading {what}", offset=fh.tell())
    return data


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into an (n, rows*cols) float64 matrix with a
    linear rescale of raw bytes to [0, 1]."""
    with _idx_open(path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _idx_read(fh, 16, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad IDX image magic {magic}", offset=0)
        raw = _idx_read(fh, count * rows * cols, "pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows * cols)


def load_idx_labels(path) -> np.ndarray:
    with _idx_open(path) as fh:
        magic, count = struct.unpack(">II", _idx_read(fh, 8, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"bad IDX label magic {magic}", offset=0)
        raw = _idx_read(fh, count, "label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"IDX image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    examples = tuple(
        Example(features=images[i], label=int(labels[i]), uid=i)
        for i in range(images.shape[0])
    )
    return Dataset(examples, num_classes, images.shape[1], PROVENANCE_CLEAN)


def dump_csv(dataset: Dataset, path) -> None:
    """One row per example: features..., label, provenance (the example's
    origin string)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = [f"f{i}" for i in range(dataset.feature_dim)] + ["label", "provenance"]
        fh.write(",".join(header) + "\n")
        for ex in dataset.examples:
            cells = [repr(float(v)) for v in ex.features]
            cells.append(str(ex.label))
            cells.append(ex.origin)
            fh.write(",".join(cells) + "\n")
