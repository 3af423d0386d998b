"""Tests for the config file, overrides and validation."""

import json

import pytest

from onramp.cli import main
from onramp.config import (
    CONFIG_FILE,
    CONFIG_VERSION,
    DEFAULT_CONFIG,
    PipelineConfig,
    load_config,
    save_default_config,
)
from onramp.errors import ConfigError


class TestLoadConfig:
    def test_none_returns_defaults(self):
        config = load_config(None)
        assert config.data == DEFAULT_CONFIG
        assert config.seed == 0
        assert config.jobs == 1
        assert str(config.out) == "out"

    def test_save_and_load_roundtrip(self, tmp_path):
        path = save_default_config(tmp_path / CONFIG_FILE)
        assert load_config(path).data == DEFAULT_CONFIG

    def test_save_into_directory(self, tmp_path):
        path = save_default_config(tmp_path)
        assert path == tmp_path / CONFIG_FILE
        assert path.exists()

    def test_user_overrides_merged(self, write_config):
        path = write_config({"seed": 42, "nhmm": {"iterations": 500, "burn_in": 100}})
        config = load_config(path)
        assert config.seed == 42
        assert config["nhmm"]["iterations"] == 500
        assert config["nhmm"]["thinning"] == 2
        assert config.source == path

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"config_version": CONFIG_VERSION, "iteratons": 5}))
        with pytest.raises(ConfigError, match="'iteratons'"):
            load_config(path)

    def test_unknown_nested_key_is_dotted(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"config_version": CONFIG_VERSION, "nhmm": {"burnin": 5}}))
        with pytest.raises(ConfigError, match="'nhmm.burnin'"):
            load_config(path)

    def test_section_must_be_object(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"config_version": CONFIG_VERSION, "tskm": 3}))
        with pytest.raises(ConfigError, match="must be an object"):
            load_config(path)

    def test_missing_version(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 1}))
        with pytest.raises(ConfigError, match="config_version"):
            load_config(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"config_version": 99}))
        with pytest.raises(ConfigError, match="unsupported"):
            load_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")


class TestPipelineConfig:
    def test_set_dotted(self):
        config = PipelineConfig()
        config.set("tskm.k", 4)
        assert config["tskm"]["k"] == 4

    def test_set_unknown(self):
        with pytest.raises(ConfigError):
            PipelineConfig().set("nhmm.nope", 1)

    def test_defaults_do_not_leak_between_instances(self):
        a = PipelineConfig()
        a.set("seed", 9)
        assert PipelineConfig().seed == 0
        assert DEFAULT_CONFIG["seed"] == 0

    def test_fit_config(self):
        config = PipelineConfig()
        config.set("nhmm.iterations", 300)
        config.set("nhmm.burn_in", 100)
        fit = config.fit_config(seed=17)
        assert fit.iterations == 300 and fit.burn_in == 100
        assert fit.seed == 17
        assert fit.pg_truncation == 100
        assert config.fit_config().seed == 0

    def test_extraction_config(self):
        cfg = PipelineConfig().extraction_config()
        assert cfg.lane_width_m == 3.5
        assert cfg.half_width == 1.75

    def test_ranges(self):
        config = PipelineConfig()
        assert list(config.nhmm_k_range()) == [1, 2, 3, 4, 5, 6]
        assert list(config.tskm_k_range()) == list(range(1, 11))


class TestValidate:
    def test_defaults_are_valid(self):
        assert PipelineConfig().validate() == []

    def test_collects_every_problem(self):
        config = PipelineConfig()
        config.set("jobs", 0)
        config.set("nhmm.burn_in", 5000)
        config.set("nhmm.decoder", "posterior")
        config.set("tskm.k_range", [5, 2])
        problems = config.validate()
        assert len(problems) == 4
        assert any("jobs" in p for p in problems)
        assert any("burn_in" in p for p in problems)
        assert any("decoder" in p for p in problems)
        assert any("tskm.k_range" in p for p in problems)

    def test_even_smoothing_window(self):
        config = PipelineConfig()
        config.set("extraction.smoothing_window", 4)
        assert any("smoothing_window" in p for p in config.validate())

    def test_state_range_capped(self):
        config = PipelineConfig()
        config.set("nhmm.k_range", [1, 50])
        assert any("nhmm.k_range" in p for p in config.validate())

    def test_extract_requires_inputs(self, tmp_path):
        config = PipelineConfig()
        assert config.validate("extract") == ["tracks is required for extract",
                                              "geometry is required for extract"]
        config.set("tracks", str(tmp_path / "missing.csv"))
        config.set("geometry", str(tmp_path / "missing.json"))
        problems = config.validate("extract")
        assert all("not found" in p for p in problems)

    def test_wrong_types_reported_not_raised(self):
        config = PipelineConfig()
        config.set("extraction.peak_floor", "0.1")
        config.set("tskm.restarts", [3])
        config.set("nhmm.pooled", 1)
        config.set("jobs", True)
        problems = config.validate()
        assert len(problems) == 4
        assert any(p.startswith("extraction.peak_floor must be float") for p in problems)
        assert any(p.startswith("tskm.restarts must be int") for p in problems)
        assert any(p.startswith("nhmm.pooled must be bool") for p in problems)
        assert any(p.startswith("jobs must be int") for p in problems)

    def test_int_accepted_for_float_setting(self):
        config = PipelineConfig()
        config.set("extraction.lane_width_m", 4)
        assert config.validate() == []

    def test_nullable_settings_typed_when_set(self):
        config = PipelineConfig()
        config.set("tskm.k", "3")
        config.set("nhmm.k_states", 2)
        assert config.validate() == ["tskm.k must be int (got str '3')"]

    def test_wrong_type_in_file_exits_1(self, write_config, capsys):
        path = write_config({"extraction": {"peak_floor": "0.1"}, "nhmm": {"iterations": [4000]}})
        assert main(["--config", str(path), "synth"]) == 1
        out = capsys.readouterr().out
        assert "Error: extraction.peak_floor must be float" in out
        assert "Error: nhmm.iterations must be int" in out
