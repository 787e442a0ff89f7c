"""Metrics and per-stage reports.

All evaluation runs at temperature 1; argmax ties break to the lowest
class index so metrics are deterministic. A stage report mirrors one
column group of the harness's five-stage results table.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import BackdoorSpec, Dataset
from .errors import DomainError, ShapeError
from .nn_core import Batch, ParameterVector, forward, loss_hard

logger = logging.getLogger(__name__)

STAGE_TRAINING = "Training"
STAGE_SUBTRACTION = "UL-Subtraction"
STAGE_DISTILLATION = "UL-Distillation"
STAGE_POST_TRAINING = "Post-Training"
STAGE_RETRAINING = "Re-Training"

STAGES = (
    STAGE_TRAINING,
    STAGE_SUBTRACTION,
    STAGE_DISTILLATION,
    STAGE_POST_TRAINING,
    STAGE_RETRAINING,
)

REPORT_CSV_HEADER = "stage,test_acc,atk_acc,loss_ratio,skew_l2,wall_time_ms"

LOSS_RATIO_FLOOR = 1e-12


@dataclass(frozen=True)
class StageReport:
    stage: str
    test_acc: float
    atk_acc: float
    loss_ratio: float
    skew_l2: float
    wall_time_ms: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise DomainError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.test_acc <= 1.0 or not 0.0 <= self.atk_acc <= 1.0:
            raise DomainError("rates must lie in [0, 1]")
        if self.skew_l2 < 0.0:
            raise DomainError("skew_l2 must be nonnegative")


def predict(model: ParameterVector, dataset: Dataset) -> np.ndarray:
    """Argmax class predictions at temperature 1 (ties -> lowest index)."""
    probs, _ = forward(model, Batch(dataset.features_matrix()), temperature=1.0)
    return np.argmax(probs, axis=1)


def test_accuracy(model: ParameterVector, test_set: Dataset) -> float:
    if len(test_set) == 0:
        raise DomainError("test set is empty")
    predictions = predict(model, test_set)
    return float(np.mean(predictions == test_set.labels_array()))


def attack_success(
    model: ParameterVector, attack_set: Dataset, spec: BackdoorSpec
) -> float:
    """Fraction of triggered inputs predicted as the attack's target class.

    Base misclassification into the target class counts toward this rate;
    compare against :func:`misclassification_to_target` when judging
    whether residual attack success is just model error.
    """
    if len(attack_set) == 0:
        raise DomainError("attack set is empty")
    predictions = predict(model, attack_set)
    return float(np.mean(predictions == spec.target_class))


def misclassification_to_target(
    model: ParameterVector, test_set: Dataset, spec: BackdoorSpec
) -> float:
    """How often clean source-class inputs land on the target class anyway."""
    sources = [ex for ex in test_set.examples if ex.label == spec.source_class]
    if not sources:
        raise DomainError("test set has no source-class examples")
    subset = Dataset(tuple(sources), test_set.num_classes, test_set.feature_dim,
                     test_set.provenance)
    predictions = predict(model, subset)
    return float(np.mean(predictions == spec.target_class))


def _hard_test_loss(model: ParameterVector, test_set: Dataset) -> float:
    probs, _ = forward(model, Batch(test_set.features_matrix()), temperature=1.0)
    return loss_hard(probs, test_set.labels_array())


def loss_ratio(
    original_model: ParameterVector,
    candidate_model: ParameterVector,
    test_set: Dataset,
) -> float:
    """Test loss of the original model divided by the candidate's.

    Approaches 1 as the candidate recovers. A candidate loss below the
    floor is clamped (warning logged) rather than raising.
    """
    if not original_model.same_manifest(candidate_model):
        raise ShapeError("models have different manifests")
    if len(test_set) == 0:
        raise DomainError("test set is empty")
    numerator = _hard_test_loss(original_model, test_set)
    denominator = _hard_test_loss(candidate_model, test_set)
    if denominator < LOSS_RATIO_FLOOR:
        logger.warning(
            "candidate loss %.3e below floor %.0e; clamping", denominator, LOSS_RATIO_FLOOR
        )
        denominator = LOSS_RATIO_FLOOR
    return numerator / denominator


def skew_norm(model_a: ParameterVector, model_b: ParameterVector) -> float:
    """L2 distance over flat parameters."""
    if not model_a.same_manifest(model_b):
        raise ShapeError("models have different manifests")
    return float(np.linalg.norm(model_a.values - model_b.values))


@dataclass(frozen=True)
class EvalContext:
    """Everything stage_report needs: evaluation sets plus the two
    reference models (original for the loss ratio, baseline for skew)."""

    test_set: Dataset
    attack_set: Dataset
    spec: BackdoorSpec
    original_model: ParameterVector
    reference_model: Optional[ParameterVector] = None


def stage_report(
    stage: str,
    model: ParameterVector,
    context: EvalContext,
    wall_time_ms: int = 0,
) -> StageReport:
    reference = context.reference_model
    return StageReport(
        stage=stage,
        test_acc=test_accuracy(model, context.test_set),
        atk_acc=attack_success(model, context.attack_set, context.spec),
        loss_ratio=loss_ratio(context.original_model, model, context.test_set),
        skew_l2=skew_norm(model, reference) if reference is not None else 0.0,
        wall_time_ms=int(wall_time_ms),
    )


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def reports_to_csv(reports: Sequence[StageReport]) -> str:
    lines = [REPORT_CSV_HEADER]
    for r in reports:
        lines.append(
            ",".join(
                [
                    r.stage,
                    repr(float(r.test_acc)),
                    repr(float(r.atk_acc)),
                    repr(float(r.loss_ratio)),
                    repr(float(r.skew_l2)),
                    str(int(r.wall_time_ms)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Sequence[StageReport], config: Optional[dict] = None) -> str:
    payload = {"reports": [asdict(r) for r in reports]}
    if config is not None:
        payload["config"] = config
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list[StageReport]:
    payload = json.loads(text)
    return [StageReport(**entry) for entry in payload["reports"]]


# ---------------------------------------------------------------------------
# SVG progress plot (hand-rolled: no plotting dependency, byte-stable output)
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H, _PAD = 480, 260, 40


def _polyline(points, color):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'


def _panel(title, series, x_label, offset_y):
    """One chart panel; series is a list of (name, color, [(x, y)...]) with
    y already in [0, ~1.2]."""
    parts = [
        f'<text x="{_PAD}" y="{offset_y + 14}" font-size="12" font-family="monospace">{title}</text>'
    ]
    x_min = min(x for _, _, pts in series for x, _ in pts)
    x_max = max(x for _, _, pts in series for x, _ in pts)
    y_max = max(1.0, max(y for _, _, pts in series for _, y in pts))
    span_x = max(x_max - x_min, 1)
    plot_w = _SVG_W - 2 * _PAD
    plot_h = _SVG_H - 2 * _PAD

    def to_px(x, y):
        px = _PAD + (x - x_min) / span_x * plot_w
        py = offset_y + _PAD + (1.0 - y / y_max) * plot_h
        return px, py

    axis_y = offset_y + _PAD + plot_h
    parts.append(
        f'<line x1="{_PAD}" y1="{axis_y}" x2="{_PAD + plot_w}" y2="{axis_y}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{_PAD}" y1="{offset_y + _PAD}" x2="{_PAD}" y2="{axis_y}" stroke="black"/>'
    )
    parts.append(
        f'<text x="{_PAD + plot_w - 30}" y="{axis_y + 16}" font-size="10" font-family="monospace">{x_label}</text>'
    )
    legend_x = _PAD + 8
    for i, (name, color, pts) in enumerate(series):
        parts.append(_polyline([to_px(x, y) for x, y in pts], color))
        parts.append(
            f'<text x="{legend_x}" y="{offset_y + _PAD + 12 + 12 * i}" font-size="10" '
            f'font-family="monospace" fill="{color}">{name}</text>'
        )
    return "\n".join(parts)


def render_progress_svg(training_rows, distill_rows) -> str:
    """Two stacked panels: per-round training accuracy/attack rate, and
    per-epoch distillation accuracy/attack rate/loss ratio."""
    panels = []
    if training_rows:
        panels.append(
            _panel(
                "training rounds",
                [
                    ("test_acc", "#1f77b4", [(r, a) for r, a, _ in training_rows]),
                    ("attack_acc", "#d62728", [(r, k) for r, _, k in training_rows]),
                ],
                "round",
                0,
            )
        )
    if distill_rows:
        panels.append(
            _panel(
                "distillation epochs",
                [
                    ("test_acc", "#1f77b4", [(e, a) for e, a, _, _ in distill_rows]),
                    ("attack_acc", "#d62728", [(e, k) for e, _, k, _ in distill_rows]),
                    ("loss_ratio", "#2ca02c", [(e, min(lr, 1.2)) for e, _, _, lr in distill_rows]),
                ],
                "epoch",
                _SVG_H,
            )
        )
    height = _SVG_H * max(len(panels), 1)
    body = "\n".join(panels)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{height}" '
        f'viewBox="0 0 {_SVG_W} {height}">\n{body}\n</svg>\n'
    )
