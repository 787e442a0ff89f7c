import pytest

from fedunlearn.config import (
    config_to_text,
    default_config,
    parse_config,
)
from fedunlearn.errors import (
    ConfigFileError,
    ConfigSyntaxError,
    InvariantError,
    UnknownKeyError,
)


def write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParseConfig:
    def test_minimal_config_gets_defaults(self, tmp_path):
        path = write(tmp_path, "[run]\nmaster_seed = 7\n")
        cfg = parse_config(path)
        assert cfg.master_seed == 7
        assert cfg.data.kind == "synthetic"
        assert cfg.data.n_clients == 10
        assert cfg.training.rounds == 30
        assert cfg.unlearn.distill.epochs == 5
        assert cfg.unlearn.distill.temperature == 3.0
        # derived seeds default to the master seed
        assert cfg.data.seed == 7
        assert cfg.training.local.shuffle_seed_base == 7

    def test_explicit_seed_not_overridden_by_master(self, tmp_path):
        path = write(tmp_path, "[run]\nmaster_seed = 7\n\n[data]\nseed = 3\n")
        cfg = parse_config(path)
        assert cfg.data.seed == 3
        assert cfg.training.local.shuffle_seed_base == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigFileError):
            parse_config(tmp_path / "absent.cfg")

    def test_syntax_error_carries_line_number(self, tmp_path):
        path = write(tmp_path, "[run]\nmaster_seed = 1\nthis line has no equals\n")
        with pytest.raises(ConfigSyntaxError) as err:
            parse_config(path)
        assert err.value.line == 3

    def test_key_before_section_is_syntax_error(self, tmp_path):
        path = write(tmp_path, "master_seed = 1\n")
        with pytest.raises(ConfigSyntaxError):
            parse_config(path)

    def test_unknown_section(self, tmp_path):
        path = write(tmp_path, "[experiments]\nfoo = 1\n")
        with pytest.raises(UnknownKeyError):
            parse_config(path)

    def test_unknown_key(self, tmp_path):
        path = write(tmp_path, "[training]\nmomentum = 0.9\n")
        with pytest.raises(UnknownKeyError) as err:
            parse_config(path)
        assert "training.momentum" in str(err.value)

    def test_attacker_out_of_range_names_field(self, tmp_path):
        path = write(tmp_path, "[data]\nn_clients = 4\n\n[attack]\nattacker = 4\n")
        with pytest.raises(InvariantError) as err:
            parse_config(path)
        assert err.value.field == "attack.attacker"

    def test_bad_value_type_names_field(self, tmp_path):
        path = write(tmp_path, "[training]\nrounds = thirty\n")
        with pytest.raises(InvariantError) as err:
            parse_config(path)
        assert err.value.field == "training.rounds"

    def test_source_equal_target_rejected(self, tmp_path):
        path = write(tmp_path, "[attack]\nsource_class = 2\ntarget_class = 2\n")
        with pytest.raises(InvariantError):
            parse_config(path)

    def test_bad_format_rejected(self, tmp_path):
        path = write(tmp_path, "[output]\nformats = csv,pdf\n")
        with pytest.raises(InvariantError) as err:
            parse_config(path)
        assert err.value.field == "output.formats"

    def test_bad_mode_rejected(self, tmp_path):
        path = write(tmp_path, "[unlearn]\nmode = eager\n")
        with pytest.raises(InvariantError):
            parse_config(path)


class TestConfigHash:
    def test_identical_files_identical_hashes(self, tmp_path):
        text = "[run]\nmaster_seed = 5\n\n[training]\nrounds = 8\n"
        a = parse_config(write(tmp_path, text, "a.cfg"))
        b = parse_config(write(tmp_path, text, "b.cfg"))
        assert a.config_hash == b.config_hash

    def test_formatting_does_not_change_hash(self, tmp_path):
        a = parse_config(write(tmp_path, "[run]\nmaster_seed = 5\n", "a.cfg"))
        b = parse_config(
            write(tmp_path, "# comment\n[run]\nmaster_seed =   5   # inline\n", "b.cfg")
        )
        assert a.config_hash == b.config_hash

    def test_different_settings_change_hash(self, tmp_path):
        a = parse_config(write(tmp_path, "[run]\nmaster_seed = 5\n", "a.cfg"))
        b = parse_config(write(tmp_path, "[run]\nmaster_seed = 6\n", "b.cfg"))
        assert a.config_hash != b.config_hash

    def test_seed_override_changes_hash_and_derived_seeds(self, tmp_path):
        path = write(tmp_path, "[run]\nmaster_seed = 5\n")
        base = parse_config(path)
        overridden = parse_config(path, seed_override=9)
        assert overridden.master_seed == 9
        assert overridden.data.seed == 9
        assert base.config_hash != overridden.config_hash

    def test_default_config_matches_minimal_file(self, tmp_path):
        path = write(tmp_path, "[run]\nmaster_seed = 1\n")
        assert parse_config(path).config_hash == default_config().config_hash


class TestConfigEcho:
    def test_resolved_text_reparses_to_same_hash(self, tmp_path):
        cfg = default_config(training={"rounds": "4"})
        path = write(tmp_path, config_to_text(cfg))
        assert parse_config(path).config_hash == cfg.config_hash

    def test_flat_dict_covers_all_sections(self):
        cfg = default_config()
        flat = cfg.flat_dict()
        for section in ("data", "attack", "training", "unlearn", "output", "run"):
            assert any(key.startswith(section + ".") for key in flat)
