"""FedAvg simulation over in-process clients, with a full update ledger.

Every round stores every client's raw parameter delta, unscaled; the
1/N_t averaging factor is applied at read time so the ledger stays
aggregation-scheme-agnostic. Clients are always processed in ascending
id order, which (together with the fixed-order arithmetic in nn_core)
makes whole runs bitwise reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from . import evaluation
from .errors import (
    ConfigurationError,
    FormatError,
    ShapeError,
    UnknownClientError,
    VersionError,
)
from .nn_core import (
    Batch,
    LayerShape,
    ParameterVector,
    backward,
    forward,
    init_model,
    manifest_size,
    sgd_step,
)
from .seeds import derive_seed, rng_for


@dataclass(frozen=True)
class LocalTrainConfig:
    """Client-side SGD settings. ``shuffle_seed_base`` feeds the per-round,
    per-client stream derivation."""

    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    shuffle_seed_base: int = 0

    def __post_init__(self):
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be finite and >= 0")


@dataclass(frozen=True)
class LedgerRound:
    """One round's raw deltas, keyed and ordered by client id."""

    deltas: tuple[tuple[int, ParameterVector], ...]

    def __post_init__(self):
        ordered = tuple(sorted(self.deltas, key=lambda item: item[0]))
        object.__setattr__(self, "deltas", ordered)

    @property
    def n_participants(self) -> int:
        return len(self.deltas)

    def delta_for(self, client_id: int) -> Optional[ParameterVector]:
        for cid, delta in self.deltas:
            if cid == client_id:
                return delta
        return None


@dataclass(frozen=True)
class UpdateLedger:
    """Initial model plus the per-round, per-client update history.

    ``client_ids`` is the declared client universe: it lets a lookup for a
    known client that never contributed return a zero vector, while an id
    outside the universe raises.
    """

    initial_model: ParameterVector
    client_ids: tuple[int, ...]
    rounds: tuple[LedgerRound, ...] = ()
    config_hash: str = ""

    def __post_init__(self):
        object.__setattr__(self, "client_ids", tuple(sorted(self.client_ids)))
        object.__setattr__(self, "rounds", tuple(self.rounds))
        for rnd in self.rounds:
            for cid, delta in rnd.deltas:
                if delta.shapes != self.initial_model.shapes:
                    raise ShapeError(f"round delta for client {cid} has a foreign manifest")
                if cid not in self.client_ids:
                    raise ConfigurationError(f"round references unknown client {cid}")


@dataclass(frozen=True)
class TrainingHistory:
    """Per-round (test accuracy, attack success) series."""

    rows: tuple[tuple[int, float, float], ...] = ()

    def to_csv(self) -> str:
        lines = ["round,test_acc,attack_acc"]
        for rnd, acc, atk in self.rows:
            lines.append(f"{rnd},{repr(float(acc))},{repr(float(atk))}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FederationRun:
    final_model: ParameterVector
    ledger: UpdateLedger
    history: TrainingHistory


@dataclass(frozen=True)
class ExperimentData:
    """Prepared datasets for one experiment: the training shards (attacker
    shard poisoned when enabled), the held-out pool and test set, and the
    triggered attack evaluation set."""

    shards: tuple[data_mod.Dataset, ...]
    distill_pool: data_mod.Dataset
    test_set: data_mod.Dataset
    attack_set: data_mod.Dataset
    spec: data_mod.BackdoorSpec
    arch: tuple[int, ...]


def prepare_experiment(config, poison: bool = True) -> ExperimentData:
    """Build all datasets for ``config`` deterministically.

    ``poison=False`` gives the no-attacker control: same data, same
    partition, but the attacker's shard stays clean.
    """
    dc = config.data
    if dc.kind == "synthetic":
        base = data_mod.gen_synthetic(
            dc.num_classes, dc.feature_dim, dc.per_class, dc.spread, dc.seed
        )
    elif dc.kind == "idx":
        base = data_mod.load_idx_dataset(dc.idx_images, dc.idx_labels, dc.num_classes)
    else:
        raise ConfigurationError(f"unknown data kind {dc.kind!r}")
    part = data_mod.partition(base, dc.n_clients, dc.seed)
    spec = config.attack.spec
    spec.validate_for(base.feature_dim)
    shards = list(part.client_shards)
    if poison:
        shards[config.attack.attacker] = data_mod.poison_shard(
            shards[config.attack.attacker], spec, seed=derive_seed(dc.seed, "poison")
        )
    attack_set = data_mod.build_attack_set(part.test_set, spec)
    arch = (base.feature_dim, *config.training.hidden_layers, base.num_classes)
    return ExperimentData(
        shards=tuple(shards),
        distill_pool=part.distill_pool,
        test_set=part.test_set,
        attack_set=attack_set,
        spec=spec,
        arch=arch,
    )


def local_train(
    global_model: ParameterVector,
    shard: data_mod.Dataset,
    cfg: LocalTrainConfig,
    round_index: int,
    client_id: int,
) -> ParameterVector:
    """Seeded mini-batch SGD from the global model; returns the delta.

    The shuffle stream is derived from (seed base, round, client id), so a
    client's batches do not depend on when the other clients run.
    """
    if len(shard) == 0:
        raise ConfigurationError(f"client {client_id} has an empty shard")
    rng = rng_for(cfg.shuffle_seed_base, "local", round_index, client_id)
    features = shard.features_matrix()
    labels = shard.labels_array()
    model = global_model
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(shard))
        for start in range(0, len(shard), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(features[idx], hard_labels=labels[idx])
            _, cache = forward(model, batch, temperature=1.0)
            grad = backward(model, cache, "hard", batch.hard_labels, temperature=1.0)
            model = sgd_step(model, grad, cfg.learning_rate)
    return model.sub(global_model)


def fedavg_aggregate(
    global_model: ParameterVector, deltas: Sequence[ParameterVector]
) -> ParameterVector:
    """Averaged aggregation: global + mean of deltas, summed left to right."""
    if not deltas:
        raise ConfigurationError("cannot aggregate an empty delta list")
    total = np.zeros_like(global_model.values)
    for delta in deltas:
        if delta.shapes != global_model.shapes:
            raise ShapeError("delta manifest does not match the global model")
        total = total + delta.values
    return ParameterVector(
        global_model.values + total / len(deltas), global_model.shapes
    )


def run_training(
    config,
    exclude_client: Optional[int] = None,
    poison: bool = True,
    prepared: Optional[ExperimentData] = None,
) -> FederationRun:
    """Run the configured number of FedAvg rounds with full participation,
    recording every raw delta and per-round metrics."""
    exp = prepared if prepared is not None else prepare_experiment(config, poison)
    model = init_model(exp.arch, derive_seed(config.master_seed, "init"))
    initial = model
    participants = [
        cid for cid in range(config.data.n_clients) if cid != exclude_client
    ]
    if not participants:
        raise ConfigurationError("no participants left after exclusion")
    cfg = config.training.local
    rounds = []
    rows = []
    for r in range(config.training.rounds):
        deltas = tuple(
            (cid, local_train(model, exp.shards[cid], cfg, r, cid))
            for cid in participants
        )
        rounds.append(LedgerRound(deltas))
        model = fedavg_aggregate(model, [d for _, d in deltas])
        rows.append(
            (
                r + 1,
                evaluation.test_accuracy(model, exp.test_set),
                evaluation.attack_success(model, exp.attack_set, exp.spec),
            )
        )
    ledger = UpdateLedger(
        initial_model=initial,
        client_ids=tuple(participants),
        rounds=tuple(rounds),
        config_hash=config.config_hash,
    )
    return FederationRun(model, ledger, TrainingHistory(tuple(rows)))


def continue_training(
    model: ParameterVector,
    config,
    exclude_client: Optional[int],
    rounds: int,
    round_offset: int = 0,
    prepared: Optional[ExperimentData] = None,
) -> FederationRun:
    """Continue FedAvg from ``model`` for ``rounds`` more rounds, writing a
    fresh ledger segment. Round seeds continue from ``round_offset``."""
    if rounds < 0:
        raise ConfigurationError("rounds must be >= 0")
    exp = prepared if prepared is not None else prepare_experiment(config)
    participants = [
        cid for cid in range(config.data.n_clients) if cid != exclude_client
    ]
    if not participants:
        raise ConfigurationError("no participants left after exclusion")
    cfg = config.training.local
    initial = model
    segment = []
    rows = []
    for r in range(rounds):
        round_index = round_offset + r
        deltas = tuple(
            (cid, local_train(model, exp.shards[cid], cfg, round_index, cid))
            for cid in participants
        )
        segment.append(LedgerRound(deltas))
        model = fedavg_aggregate(model, [d for _, d in deltas])
        rows.append(
            (
                round_index + 1,
                evaluation.test_accuracy(model, exp.test_set),
                evaluation.attack_success(model, exp.attack_set, exp.spec),
            )
        )
    ledger = UpdateLedger(
        initial_model=initial,
        client_ids=tuple(participants),
        rounds=tuple(segment),
        config_hash=config.config_hash,
    )
    return FederationRun(model, ledger, TrainingHistory(tuple(rows)))


def ledger_client_sum(ledger: UpdateLedger, client_id: int) -> ParameterVector:
    """Sum over rounds of the client's averaged contribution (delta / N_t).

    A known client with no recorded updates yields the zero vector; an id
    outside the ledger's universe raises UnknownClientError.
    """
    if client_id not in ledger.client_ids:
        raise UnknownClientError(
            f"client {client_id} not in ledger universe {ledger.client_ids}"
        )
    total = np.zeros_like(ledger.initial_model.values)
    for rnd in ledger.rounds:
        delta = rnd.delta_for(client_id)
        if delta is not None:
            total = total + delta.values / rnd.n_participants
    return ParameterVector(total, ledger.initial_model.shapes)


def reconstruct_final(ledger: UpdateLedger) -> ParameterVector:
    """Replay the ledger from the initial model: M_1 plus each round's
    averaged update, in order."""
    model = ledger.initial_model
    for rnd in ledger.rounds:
        model = fedavg_aggregate(model, [delta for _, delta in rnd.deltas])
    return model


# ---------------------------------------------------------------------------
# Ledger file format
# ---------------------------------------------------------------------------

LEDGER_MAGIC = b"FULG"
LEDGER_VERSION = 1


def save_ledger(ledger: UpdateLedger, path) -> None:
    with open(path, "wb") as fh:
        fh.write(LEDGER_MAGIC)
        fh.write(struct.pack("<I", LEDGER_VERSION))
        hash_bytes = ledger.config_hash.encode("ascii")
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(ledger.initial_model.shapes)))
        for shape in ledger.initial_model.shapes:
            fh.write(struct.pack("<IIB", shape.rows, shape.cols, int(shape.has_bias)))
        fh.write(struct.pack("<I", len(ledger.client_ids)))
        for cid in ledger.client_ids:
            fh.write(struct.pack("<I", cid))
        fh.write(ledger.initial_model.values.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(ledger.rounds)))
        for rnd in ledger.rounds:
            fh.write(struct.pack("<I", rnd.n_participants))
            for cid, delta in rnd.deltas:
                fh.write(struct.pack("<I", cid))
                fh.write(delta.values.astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise FormatError(f"truncated ledger while reading {what}", offset=fh.tell())
    return chunk


def load_ledger(path) -> UpdateLedger:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != LEDGER_MAGIC:
            raise FormatError(f"bad ledger magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != LEDGER_VERSION:
            raise VersionError(f"unsupported ledger version {version}", offset=4)
        (hash_len,) = struct.unpack("<H", _read_exact(fh, 2, "hash length"))
        config_hash = _read_exact(fh, hash_len, "config hash").decode("ascii")
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
        shapes = []
        for i in range(n_layers):
            rows, cols, has_bias = struct.unpack(
                "<IIB", _read_exact(fh, 9, f"layer {i}")
            )
            shapes.append(LayerShape(rows, cols, bool(has_bias)))
        shapes = tuple(shapes)
        vec_len = manifest_size(shapes)
        (n_clients,) = struct.unpack("<I", _read_exact(fh, 4, "client count"))
        client_ids = struct.unpack(
            f"<{n_clients}I", _read_exact(fh, 4 * n_clients, "client ids")
        )

        def read_vector(what):
            payload = _read_exact(fh, vec_len * 8, what)
            return ParameterVector(np.frombuffer(payload, dtype="<f8").copy(), shapes)

        initial = read_vector("initial model")
        (n_rounds,) = struct.unpack("<I", _read_exact(fh, 4, "round count"))
        rounds = []
        for r in range(n_rounds):
            (n_part,) = struct.unpack(
                "<I", _read_exact(fh, 4, f"round {r} participant count")
            )
            deltas = []
            for _ in range(n_part):
                (cid,) = struct.unpack(
                    "<I", _read_exact(fh, 4, f"round {r} client id")
                )
                deltas.append((cid, read_vector(f"round {r} delta")))
            rounds.append(LedgerRound(tuple(deltas)))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after ledger", offset=fh.tell() - 1)
    return UpdateLedger(
        initial_model=initial,
        client_ids=tuple(client_ids),
        rounds=tuple(rounds),
        config_hash=config_hash,
    )
