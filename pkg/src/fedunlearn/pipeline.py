"""Five-stage pipeline orchestration and artifact persistence.

Stages: training -> subtraction -> distillation -> posttraining ->
retraining, then reports. Every stage round-trips through disk artifacts
(checkpoint + sidecar metadata) so individual CLI subcommands, resumed
runs, and the full pipeline all share one code path. Writes are atomic
(temp file + rename) and every artifact embeds the config hash; loading
an artifact from a different config is rejected.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import evaluation, federation, unlearning
from .config import ExperimentConfig, config_to_text
from .errors import (
    ArtifactMismatchError,
    ConfigurationError,
    FedUnlearnError,
    StageError,
    StateError,
)
from .evaluation import (
    STAGE_DISTILLATION,
    STAGE_POST_TRAINING,
    STAGE_RETRAINING,
    STAGE_SUBTRACTION,
    STAGE_TRAINING,
    EvalContext,
    StageReport,
    reports_to_csv,
    reports_to_json,
    render_progress_svg,
    stage_report,
)
from .federation import ExperimentData, load_ledger, save_ledger
from .nn_core import ParameterVector, load_checkpoint, save_checkpoint

STAGE_KEYS = ("training", "subtraction", "distillation", "posttraining", "retraining")

STAGE_NAME_BY_KEY = {
    "training": STAGE_TRAINING,
    "subtraction": STAGE_SUBTRACTION,
    "distillation": STAGE_DISTILLATION,
    "posttraining": STAGE_POST_TRAINING,
    "retraining": STAGE_RETRAINING,
}

LEDGER_FILE = "ledger.bin"
POSTTRAIN_LEDGER_FILE = "ledger_posttraining.bin"
MANIFEST_FILE = "manifest.json"
REPORT_BASENAME = "reports"
DISTILL_HISTORY_FILE = "distill_history.csv"


@dataclass(frozen=True)
class RunManifest:
    config_hash: str
    stage_checkpoints: dict[str, str]
    report_paths: tuple[str, ...]
    tool_version: str


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def checkpoint_path(out: Path, key: str) -> Path:
    return out / f"{key}.ckpt"


def _meta_path(out: Path, key: str) -> Path:
    return out / f"{key}.ckpt.meta.json"


def _write_stage_checkpoint(
    out: Path, key: str, model: ParameterVector, config: ExperimentConfig, wall_ms: int
) -> None:
    tmp = checkpoint_path(out, key).with_suffix(".ckpt.tmp")
    save_checkpoint(model, tmp)
    os.replace(tmp, checkpoint_path(out, key))
    meta = {
        "stage": key,
        "config_hash": config.config_hash,
        "seed": config.master_seed,
        "tool_version": __version__,
        "wall_time_ms": int(wall_ms),
    }
    _atomic_write_text(_meta_path(out, key), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_stage_checkpoint(
    out: Path, key: str, config: ExperimentConfig
) -> tuple[ParameterVector, dict]:
    """Load a stage checkpoint, rejecting artifacts from other configs."""
    ckpt = checkpoint_path(out, key)
    meta_file = _meta_path(out, key)
    if not ckpt.is_file() or not meta_file.is_file():
        raise StateError(f"stage '{key}' has no checkpoint under {out}")
    meta = json.loads(meta_file.read_text())
    if meta.get("config_hash") != config.config_hash:
        raise ArtifactMismatchError(
            f"checkpoint {ckpt} was produced by config {meta.get('config_hash')!r}, "
            f"current config is {config.config_hash!r}"
        )
    return load_checkpoint(ckpt), meta


def _stage_done(out: Path, key: str, config: ExperimentConfig) -> bool:
    try:
        load_stage_checkpoint(out, key, config)
    except (FedUnlearnError, OSError, json.JSONDecodeError):
        return False
    if key == "training" and not (out / LEDGER_FILE).is_file():
        return False
    return True


def _prepared(config: ExperimentConfig) -> ExperimentData:
    return federation.prepare_experiment(config)


# ---------------------------------------------------------------------------
# Stage implementations (each reads its inputs from disk, writes its outputs)
# ---------------------------------------------------------------------------


def stage_training(
    config: ExperimentConfig, out: Path, resume: bool = False,
    prepared: Optional[ExperimentData] = None,
) -> ParameterVector:
    if resume and _stage_done(out, "training", config):
        model, _ = load_stage_checkpoint(out, "training", config)
        return model
    start = time.perf_counter()
    run = federation.run_training(config, prepared=prepared)
    elapsed = int((time.perf_counter() - start) * 1000)
    _write_stage_checkpoint(out, "training", run.final_model, config, elapsed)
    tmp = out / (LEDGER_FILE + ".tmp")
    save_ledger(run.ledger, tmp)
    os.replace(tmp, out / LEDGER_FILE)
    _atomic_write_text(out / "history_training.csv", run.history.to_csv())
    return run.final_model


def stage_subtraction(
    config: ExperimentConfig, out: Path, resume: bool = False,
    prepared: Optional[ExperimentData] = None,
) -> ParameterVector:
    if resume and _stage_done(out, "subtraction", config):
        model, _ = load_stage_checkpoint(out, "subtraction", config)
        return model
    final_model, _ = load_stage_checkpoint(out, "training", config)
    ledger = load_ledger(out / LEDGER_FILE)
    if ledger.config_hash and ledger.config_hash != config.config_hash:
        raise ArtifactMismatchError("ledger belongs to a different config")
    start = time.perf_counter()
    if config.unlearn.mode == "rescaled":
        model = unlearning.subtract_history_rescaled(
            final_model, ledger, config.attack.attacker
        )
    else:
        model = unlearning.subtract_history(final_model, ledger, config.attack.attacker)
    elapsed = int((time.perf_counter() - start) * 1000)
    _write_stage_checkpoint(out, "subtraction", model, config, elapsed)
    return model


def stage_distillation(
    config: ExperimentConfig, out: Path, resume: bool = False,
    prepared: Optional[ExperimentData] = None,
) -> ParameterVector:
    if resume and _stage_done(out, "distillation", config):
        model, _ = load_stage_checkpoint(out, "distillation", config)
        return model
    teacher, _ = load_stage_checkpoint(out, "training", config)
    student, _ = load_stage_checkpoint(out, "subtraction", config)
    exp = prepared if prepared is not None else _prepared(config)
    epoch_rows: list[tuple[int, float, float, float]] = []

    def record(epoch: int, current: ParameterVector) -> None:
        epoch_rows.append(
            (
                epoch,
                evaluation.test_accuracy(current, exp.test_set),
                evaluation.attack_success(current, exp.attack_set, exp.spec),
                evaluation.loss_ratio(teacher, current, exp.test_set),
            )
        )

    start = time.perf_counter()
    model = unlearning.distill_remedy(
        teacher, student, exp.distill_pool, config.unlearn.distill, epoch_callback=record
    )
    elapsed = int((time.perf_counter() - start) * 1000)
    _write_stage_checkpoint(out, "distillation", model, config, elapsed)
    lines = ["epoch,test_acc,attack_acc,loss_ratio"]
    for epoch, acc, atk, ratio in epoch_rows:
        lines.append(f"{epoch},{repr(acc)},{repr(atk)},{repr(ratio)}")
    _atomic_write_text(out / DISTILL_HISTORY_FILE, "\n".join(lines) + "\n")
    return model


def stage_posttraining(
    config: ExperimentConfig, out: Path, resume: bool = False,
    prepared: Optional[ExperimentData] = None,
) -> ParameterVector:
    if resume and _stage_done(out, "posttraining", config):
        model, _ = load_stage_checkpoint(out, "posttraining", config)
        return model
    distilled, _ = load_stage_checkpoint(out, "distillation", config)
    start = time.perf_counter()
    run = federation.continue_training(
        distilled,
        config,
        config.attack.attacker,
        config.unlearn.post_rounds,
        round_offset=config.training.rounds,
        prepared=prepared,
    )
    elapsed = int((time.perf_counter() - start) * 1000)
    _write_stage_checkpoint(out, "posttraining", run.final_model, config, elapsed)
    tmp = out / (POSTTRAIN_LEDGER_FILE + ".tmp")
    save_ledger(run.ledger, tmp)
    os.replace(tmp, out / POSTTRAIN_LEDGER_FILE)
    _atomic_write_text(out / "history_posttraining.csv", run.history.to_csv())
    return run.final_model


def stage_retraining(
    config: ExperimentConfig, out: Path, resume: bool = False,
    prepared: Optional[ExperimentData] = None,
) -> ParameterVector:
    if resume and _stage_done(out, "retraining", config):
        model, _ = load_stage_checkpoint(out, "retraining", config)
        return model
    start = time.perf_counter()
    model, history = unlearning.retrain_baseline(
        config, config.attack.attacker, prepared=prepared
    )
    elapsed = int((time.perf_counter() - start) * 1000)
    _write_stage_checkpoint(out, "retraining", model, config, elapsed)
    _atomic_write_text(out / "history_retraining.csv", history.to_csv())
    return model


_STAGE_FUNCS = {
    "training": stage_training,
    "subtraction": stage_subtraction,
    "distillation": stage_distillation,
    "posttraining": stage_posttraining,
    "retraining": stage_retraining,
}


def run_stage(
    key: str, config: ExperimentConfig, out: Path, resume: bool = False,
    prepared: Optional[ExperimentData] = None,
) -> ParameterVector:
    if key not in _STAGE_FUNCS:
        raise ConfigurationError(f"unknown stage {key!r}; expected one of {STAGE_KEYS}")
    try:
        return _STAGE_FUNCS[key](config, out, resume=resume, prepared=prepared)
    except StageError:
        raise
    except FedUnlearnError as exc:
        raise StageError(key, str(exc)) from exc


# ---------------------------------------------------------------------------
# Reports and manifest
# ---------------------------------------------------------------------------


def build_reports(
    config: ExperimentConfig, out: Path,
    prepared: Optional[ExperimentData] = None,
) -> list[StageReport]:
    """Assemble the five stage reports from on-disk checkpoints."""
    exp = prepared if prepared is not None else _prepared(config)
    models = {}
    metas = {}
    for key in STAGE_KEYS:
        models[key], metas[key] = load_stage_checkpoint(out, key, config)
    context = EvalContext(
        test_set=exp.test_set,
        attack_set=exp.attack_set,
        spec=exp.spec,
        original_model=models["training"],
        reference_model=models["retraining"],
    )
    reports = []
    for key in STAGE_KEYS:
        reports.append(
            stage_report(
                STAGE_NAME_BY_KEY[key],
                models[key],
                context,
                wall_time_ms=metas[key].get("wall_time_ms", 0),
            )
        )
    return reports


def read_history_rows(path: Path):
    rows = []
    if not path.is_file():
        return rows
    for line in path.read_text().splitlines()[1:]:
        parts = line.split(",")
        rows.append(tuple(float(p) for p in parts))
    return rows


def emit_report(
    reports: Sequence[StageReport],
    fmt: str,
    path,
    config: Optional[ExperimentConfig] = None,
    training_rows=None,
    distill_rows=None,
) -> Path:
    """Write the stage reports in one format; returns the written path."""
    if not reports:
        raise ConfigurationError("no reports to emit")
    path = Path(path)
    if fmt == "csv":
        _atomic_write_text(path, reports_to_csv(reports))
    elif fmt == "json":
        flat = config.flat_dict() if config is not None else None
        _atomic_write_text(path, reports_to_json(reports, flat))
    elif fmt == "svg":
        _atomic_write_text(
            path, render_progress_svg(training_rows or [], distill_rows or [])
        )
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    return path


def write_manifest(out: Path, manifest: RunManifest) -> Path:
    for label, file_path in list(manifest.stage_checkpoints.items()) + [
        ("report", p) for p in manifest.report_paths
    ]:
        if not Path(file_path).is_file():
            raise StateError(f"manifest references missing file for {label}: {file_path}")
    payload = {
        "config_hash": manifest.config_hash,
        "stage_checkpoints": dict(sorted(manifest.stage_checkpoints.items())),
        "report_paths": list(manifest.report_paths),
        "tool_version": manifest.tool_version,
    }
    path = out / MANIFEST_FILE
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def run_pipeline(
    config: ExperimentConfig,
    out_dir=None,
    resume: Optional[bool] = None,
    formats: Optional[Sequence[str]] = None,
) -> RunManifest:
    """Execute all five stages, write checkpoints, reports, and manifest."""
    out = Path(out_dir) if out_dir is not None else Path(config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    resume = config.output.resume if resume is None else resume
    formats = tuple(formats) if formats is not None else config.output.formats

    _atomic_write_text(out / "config.resolved.cfg", config_to_text(config))
    prepared = _prepared(config)
    for key in STAGE_KEYS:
        run_stage(key, config, out, resume=resume, prepared=prepared)

    try:
        reports = build_reports(config, out, prepared=prepared)
    except FedUnlearnError as exc:
        raise StageError("report", str(exc)) from exc

    report_paths = []
    emit_formats = list(formats)
    if "csv" not in emit_formats:
        emit_formats.insert(0, "csv")
    training_rows = read_history_rows(out / "history_training.csv")
    distill_rows = read_history_rows(out / DISTILL_HISTORY_FILE)
    for fmt in emit_formats:
        path = emit_report(
            reports,
            fmt,
            out / f"{REPORT_BASENAME}.{fmt}",
            config=config,
            training_rows=training_rows,
            distill_rows=distill_rows,
        )
        report_paths.append(str(path))

    manifest = RunManifest(
        config_hash=config.config_hash,
        stage_checkpoints={
            key: str(checkpoint_path(out, key)) for key in STAGE_KEYS
        },
        report_paths=tuple(report_paths),
        tool_version=__version__,
    )
    write_manifest(out, manifest)
    return manifest
