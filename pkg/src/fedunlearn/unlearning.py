"""Client unlearning: subtract the target's accumulated updates, then
repair the resulting skew with knowledge distillation.

Subtraction is implemented as a ledger replay in which the target's
deltas are replaced by zero vectors, round by round, through the same
aggregation code path as training. For a single round this is bitwise
identical to aggregating without the target's contribution; over many
rounds it equals ``final - sum(averaged target deltas)`` up to float
rounding, while keeping exactness where exactness is testable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import federation
from .data import ORIGIN_POOL, PROVENANCE_POOL, Dataset
from .errors import (
    DomainError,
    PolicyError,
    ShapeError,
    StateError,
    UnknownClientError,
)
from .federation import (
    TrainingHistory,
    UpdateLedger,
    fedavg_aggregate,
    reconstruct_final,
)
from .nn_core import (
    Batch,
    ParameterVector,
    backward,
    forward,
    sgd_step,
)
from .seeds import rng_for

RECONSTRUCTION_TOL = 1e-6


@dataclass(frozen=True)
class DistillConfig:
    """Settings for the distillation repair step.

    ``hard_label_weight`` is the alpha of the mixed objective; it must be
    0 when the pool is treated as unlabeled (the default). The shuffle
    seed drives the batch order stream.
    """

    epochs: int = 5
    temperature: float = 3.0
    learning_rate: float = 0.02
    batch_size: int = 32
    hard_label_weight: float = 0.0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise DomainError("distillation epochs must be >= 0")
        if self.temperature <= 0:
            raise DomainError("temperature must be positive")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not 0.0 <= self.hard_label_weight <= 1.0:
            raise DomainError("hard_label_weight must lie in [0, 1]")


@dataclass(frozen=True)
class SkewRecord:
    """L2 distance between a stage's model and a reference model."""

    stage: str
    l2: float

    def __post_init__(self):
        if self.l2 < 0:
            raise DomainError("skew must be nonnegative")


def _check_ledger_final(final_model: ParameterVector, ledger: UpdateLedger) -> None:
    if final_model.shapes != ledger.initial_model.shapes:
        raise ShapeError("final model manifest does not match the ledger")
    replayed = reconstruct_final(ledger)
    gap = np.max(np.abs(replayed.values - final_model.values)) if len(final_model) else 0.0
    if gap > RECONSTRUCTION_TOL:
        raise StateError(
            f"ledger does not reconstruct this final model (max gap {gap:.3e})"
        )


def subtract_history(
    final_model: ParameterVector, ledger: UpdateLedger, target_client: int
) -> ParameterVector:
    """Remove the target's entire recorded contribution (lazy rule).

    Replays the ledger with the target's delta set to the zero vector in
    every round. The skew left behind by later rounds having depended on
    the removed updates is deliberately NOT corrected here; that is the
    distillation remedy's job.
    """
    if target_client not in ledger.client_ids:
        raise UnknownClientError(f"client {target_client} not in ledger universe")
    _check_ledger_final(final_model, ledger)
    zero = ledger.initial_model.zeros_like()
    model = ledger.initial_model
    for rnd in ledger.rounds:
        deltas = [
            zero if cid == target_client else delta for cid, delta in rnd.deltas
        ]
        model = fedavg_aggregate(model, deltas)
    return model


def subtract_history_rescaled(
    final_model: ParameterVector, ledger: UpdateLedger, target_client: int
) -> ParameterVector:
    """The rejected N-1 rescaling rule, kept as a comparison op.

    Each round contributes ``N/(N-1) * avg_update - 1/(N-1) * target_delta``.
    When the target contributed nothing in a round, the round's update
    still gets inflated by N/(N-1) -- the behavior the lazy rule avoids.
    """
    if target_client not in ledger.client_ids:
        raise UnknownClientError(f"client {target_client} not in ledger universe")
    _check_ledger_final(final_model, ledger)
    values = ledger.initial_model.values.copy()
    for rnd in ledger.rounds:
        n = rnd.n_participants
        if n < 2:
            raise DomainError("rescaled rule needs at least 2 participants per round")
        total = np.zeros_like(values)
        for _, delta in rnd.deltas:
            total = total + delta.values
        avg = total / n
        target_delta = rnd.delta_for(target_client)
        target_values = (
            target_delta.values if target_delta is not None else np.zeros_like(values)
        )
        values = values + (n / (n - 1)) * avg - target_values / (n - 1)
    return ParameterVector(values, ledger.initial_model.shapes)


def _check_pool_hygiene(pool: Dataset) -> None:
    if pool.provenance != PROVENANCE_POOL:
        raise PolicyError(
            f"distillation pool has provenance {pool.provenance!r}, expected "
            f"{PROVENANCE_POOL!r}"
        )
    for ex in pool.examples:
        if ex.origin != ORIGIN_POOL:
            raise PolicyError(
                f"pool example {ex.uid} originates from {ex.origin!r}; client data "
                "must never enter distillation"
            )


def distill_remedy(
    teacher: ParameterVector,
    student: ParameterVector,
    pool: Dataset,
    cfg: DistillConfig,
    epoch_callback: Optional[Callable[[int, ParameterVector], None]] = None,
) -> ParameterVector:
    """Repair the subtracted model by distilling from the old global model.

    For each epoch the frozen teacher labels the pool with its tempered
    softmax, and the student trains on the distillation loss (plus
    ``hard_label_weight`` times the hard loss when nonzero, using the
    pool's audit labels). Inference afterwards is at temperature 1;
    nothing about the returned vector needs resetting.

    The pool must consist purely of distill-pool examples; any example
    originating from a client shard trips the policy check.
    """
    _check_pool_hygiene(pool)
    if teacher.shapes != student.shapes:
        raise ShapeError("teacher and student manifests differ")
    if cfg.epochs == 0:
        return student
    features = pool.features_matrix()
    labels = pool.labels_array()
    rng = rng_for(cfg.shuffle_seed, "distill")
    for epoch in range(1, cfg.epochs + 1):
        # Teacher labels are recomputed each epoch; the teacher is frozen,
        # so this is equivalent to caching.
        teacher_probs, _ = forward(teacher, Batch(features), cfg.temperature)
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(features[idx])
            _, cache = forward(student, batch, cfg.temperature)
            grad = backward(
                student, cache, "distill", teacher_probs[idx], cfg.temperature
            )
            if cfg.hard_label_weight > 0:
                hard_grad = backward(student, cache, "hard", labels[idx], 1.0)
                grad = grad.add(hard_grad.scale(cfg.hard_label_weight))
            student = sgd_step(student, grad, cfg.learning_rate)
        if epoch_callback is not None:
            epoch_callback(epoch, student)
    return student


def retrain_baseline(
    config, excluded_client: int, prepared=None
) -> tuple[ParameterVector, TrainingHistory]:
    """Gold standard: train from scratch without the excluded client, same
    seeds everywhere else."""
    run = federation.run_training(
        config, exclude_client=excluded_client, prepared=prepared
    )
    return run.final_model, run.history


def post_train(
    model: ParameterVector,
    config,
    excluded_client: int,
    rounds: int,
    round_offset: Optional[int] = None,
    prepared=None,
) -> tuple[ParameterVector, TrainingHistory]:
    """Continue federated training from ``model`` without the excluded
    client. Appends to a fresh ledger segment internally; returns the
    improved model and its per-round history."""
    if rounds < 0:
        raise DomainError("post-training rounds must be >= 0")
    offset = config.training.rounds if round_offset is None else round_offset
    run = federation.continue_training(
        model, config, excluded_client, rounds, round_offset=offset, prepared=prepared
    )
    return run.final_model, run.history
