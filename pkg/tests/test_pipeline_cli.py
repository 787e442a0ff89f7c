import json

import pytest

from fedunlearn import cli, pipeline
from fedunlearn.config import default_config
from fedunlearn.errors import (
    ArtifactMismatchError,
    ConfigurationError,
    StageError,
)
from fedunlearn.evaluation import REPORT_CSV_HEADER, reports_from_json
from fedunlearn.pipeline import (
    STAGE_KEYS,
    build_reports,
    checkpoint_path,
    load_stage_checkpoint,
    run_pipeline,
    run_stage,
)

TINY_CFG = """\
[run]
master_seed = 3

[data]
per_class = 30
n_clients = 4
feature_dim = 8
spread = 0.8

[training]
rounds = 3
local_epochs = 1
batch_size = 16
hidden_layers = 8

[unlearn]
epochs = 2
post_rounds = 2
"""


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def tiny_config():
    return default_config(
        data={"per_class": "30", "n_clients": "4", "feature_dim": "8", "spread": "0.8"},
        training={"rounds": "3", "local_epochs": "1", "batch_size": "16", "hidden_layers": "8"},
        unlearn={"epochs": "2", "post_rounds": "2"},
    )


def strip_wall_time(csv_text):
    lines = csv_text.splitlines()
    return [",".join(line.split(",")[:-1]) for line in lines]


class TestRunPipeline:
    def test_produces_all_artifacts(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        manifest = run_pipeline(cfg, out_dir=out)
        for key in STAGE_KEYS:
            assert checkpoint_path(out, key).is_file()
            assert (out / f"{key}.ckpt.meta.json").is_file()
        assert (out / "ledger.bin").is_file()
        assert (out / "ledger_posttraining.bin").is_file()
        assert (out / "history_training.csv").is_file()
        assert (out / "history_posttraining.csv").is_file()
        assert (out / "history_retraining.csv").is_file()
        assert (out / "distill_history.csv").is_file()
        assert (out / "reports.csv").is_file()
        assert (out / "reports.json").is_file()
        assert (out / "manifest.json").is_file()
        assert (out / "config.resolved.cfg").is_file()
        assert manifest.config_hash == cfg.config_hash

    def test_reports_have_five_stages(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        lines = (out / "reports.csv").read_text().splitlines()
        assert lines[0] == REPORT_CSV_HEADER
        stages = [line.split(",")[0] for line in lines[1:]]
        assert stages == [
            "Training",
            "UL-Subtraction",
            "UL-Distillation",
            "Post-Training",
            "Re-Training",
        ]
        parsed = reports_from_json((out / "reports.json").read_text())
        assert len(parsed) == 5

    def test_json_report_embeds_resolved_config(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        payload = json.loads((out / "reports.json").read_text())
        assert payload["config"]["run.master_seed"] == "1"
        assert payload["config"]["training.rounds"] == "3"

    def test_two_runs_byte_identical(self, tmp_path):
        cfg = tiny_config()
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_pipeline(cfg, out_dir=out_a)
        run_pipeline(cfg, out_dir=out_b)
        assert (out_a / "ledger.bin").read_bytes() == (out_b / "ledger.bin").read_bytes()
        assert (
            (out_a / "ledger_posttraining.bin").read_bytes()
            == (out_b / "ledger_posttraining.bin").read_bytes()
        )
        for key in STAGE_KEYS:
            assert (
                checkpoint_path(out_a, key).read_bytes()
                == checkpoint_path(out_b, key).read_bytes()
            )
        assert strip_wall_time((out_a / "reports.csv").read_text()) == strip_wall_time(
            (out_b / "reports.csv").read_text()
        )
        for history in ("history_training.csv", "history_posttraining.csv",
                        "history_retraining.csv", "distill_history.csv"):
            assert (out_a / history).read_bytes() == (out_b / history).read_bytes()

    def test_resume_reuses_checkpoints(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        before = {key: checkpoint_path(out, key).read_bytes() for key in STAGE_KEYS}
        run_pipeline(cfg, out_dir=out, resume=True)
        after = {key: checkpoint_path(out, key).read_bytes() for key in STAGE_KEYS}
        assert before == after

    def test_resume_after_training_reproduces_downstream(self, tmp_path):
        cfg = tiny_config()
        full = tmp_path / "full"
        run_pipeline(cfg, out_dir=full)
        partial = tmp_path / "partial"
        partial.mkdir()
        run_stage("training", cfg, partial)
        run_pipeline(cfg, out_dir=partial, resume=True)
        for key in STAGE_KEYS:
            assert (
                checkpoint_path(full, key).read_bytes()
                == checkpoint_path(partial, key).read_bytes()
            )
        assert strip_wall_time((full / "reports.csv").read_text()) == strip_wall_time(
            (partial / "reports.csv").read_text()
        )

    def test_rescaled_mode_pipeline(self, tmp_path):
        lazy_cfg = tiny_config()
        rescaled_cfg = default_config(
            data={"per_class": "30", "n_clients": "4", "feature_dim": "8", "spread": "0.8"},
            training={"rounds": "3", "local_epochs": "1", "batch_size": "16", "hidden_layers": "8"},
            unlearn={"epochs": "2", "post_rounds": "2", "mode": "rescaled"},
        )
        out_lazy, out_rescaled = tmp_path / "lazy", tmp_path / "rescaled"
        run_pipeline(lazy_cfg, out_dir=out_lazy)
        run_pipeline(rescaled_cfg, out_dir=out_rescaled)
        # mode only changes the subtraction rule, not training itself
        assert (
            checkpoint_path(out_lazy, "training").read_bytes()
            == checkpoint_path(out_rescaled, "training").read_bytes()
        )
        assert (
            checkpoint_path(out_lazy, "subtraction").read_bytes()
            != checkpoint_path(out_rescaled, "subtraction").read_bytes()
        )

    def test_svg_only_when_requested(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        assert not (out / "reports.svg").exists()
        run_pipeline(cfg, out_dir=out, resume=True, formats=("csv", "svg"))
        svg = (out / "reports.svg").read_text()
        assert svg.startswith("<svg")


class TestStageIsolation:
    def test_subtraction_requires_training_artifacts(self, tmp_path):
        cfg = tiny_config()
        with pytest.raises(StageError) as err:
            run_stage("subtraction", cfg, tmp_path)
        assert err.value.stage == "subtraction"

    def test_unknown_stage_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            run_stage("warmup", tiny_config(), tmp_path)

    def test_artifacts_from_other_config_rejected(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        other = default_config(
            seed_override=99,
            data={"per_class": "30", "n_clients": "4", "feature_dim": "8", "spread": "0.8"},
            training={"rounds": "3", "local_epochs": "1", "batch_size": "16", "hidden_layers": "8"},
        )
        with pytest.raises(ArtifactMismatchError):
            load_stage_checkpoint(out, "training", other)

    def test_build_reports_from_disk(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        reports = build_reports(cfg, out)
        assert len(reports) == 5
        assert reports[0].loss_ratio == 1.0  # training vs itself


class TestCli:
    def test_pipeline_command(self, tiny_cfg_file, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(
            ["pipeline", "--config", str(tiny_cfg_file), "--out", str(out)]
        )
        assert code == 0
        captured = capsys.readouterr().out
        assert REPORT_CSV_HEADER in captured
        assert (out / "reports.csv").is_file()

    def test_stage_commands_in_order(self, tiny_cfg_file, tmp_path):
        out = tmp_path / "out"
        for command in ("train", "unlearn", "distill", "posttrain", "retrain"):
            code = cli.main(
                [command, "--config", str(tiny_cfg_file), "--out", str(out)]
            )
            assert code == 0
        code = cli.main(["report", "--config", str(tiny_cfg_file), "--out", str(out)])
        assert code == 0
        assert (out / "reports.csv").is_file()

    def test_evaluate_command(self, tiny_cfg_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["pipeline", "--config", str(tiny_cfg_file), "--out", str(out)]) == 0
        capsys.readouterr()
        code = cli.main(
            [
                "evaluate",
                "--config",
                str(tiny_cfg_file),
                "--out",
                str(out),
                "--stage",
                "distillation",
            ]
        )
        assert code == 0
        captured = capsys.readouterr().out
        assert "UL-Distillation" in captured

    def test_missing_config_file_exits_2(self, tmp_path):
        assert cli.main(["pipeline", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_invalid_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[training]\nmomentum = 0.9\n")
        assert cli.main(["pipeline", "--config", str(bad)]) == 2

    def test_stage_out_of_order_exits_3(self, tiny_cfg_file, tmp_path):
        out = tmp_path / "empty"
        assert cli.main(["unlearn", "--config", str(tiny_cfg_file), "--out", str(out)]) == 3

    def test_unwritable_output_exits_4(self, tiny_cfg_file, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory")
        out = blocker / "sub"
        assert cli.main(["train", "--config", str(tiny_cfg_file), "--out", str(out)]) == 4

    def test_seed_override_changes_outputs(self, tiny_cfg_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["train", "--config", str(tiny_cfg_file), "--out", str(out_a)]) == 0
        assert (
            cli.main(
                ["train", "--config", str(tiny_cfg_file), "--out", str(out_b), "--seed", "77"]
            )
            == 0
        )
        a = checkpoint_path(out_a, "training").read_bytes()
        b = checkpoint_path(out_b, "training").read_bytes()
        assert a != b

    def test_svg_format_flag(self, tiny_cfg_file, tmp_path):
        out = tmp_path / "out"
        code = cli.main(
            [
                "pipeline",
                "--config",
                str(tiny_cfg_file),
                "--out",
                str(out),
                "--format",
                "svg",
            ]
        )
        assert code == 0
        assert (out / "reports.svg").is_file()

    def test_resume_flag(self, tiny_cfg_file, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["pipeline", "--config", str(tiny_cfg_file), "--out", str(out)]) == 0
        before = checkpoint_path(out, "training").read_bytes()
        assert (
            cli.main(
                ["pipeline", "--config", str(tiny_cfg_file), "--out", str(out), "--resume"]
            )
            == 0
        )
        assert checkpoint_path(out, "training").read_bytes() == before


class TestEmitReport:
    def test_unknown_format_rejected(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        reports = build_reports(cfg, out)
        with pytest.raises(ConfigurationError):
            pipeline.emit_report(reports, "pdf", out / "reports.pdf")

    def test_empty_reports_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            pipeline.emit_report([], "csv", tmp_path / "reports.csv")

    def test_no_temp_files_left_behind(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        run_pipeline(cfg, out_dir=out)
        leftovers = list(out.glob("*.tmp"))
        assert leftovers == []
