import json

import pytest

import main
from subsolvers.errors import EXIT_CONFIG_ERROR, EXIT_OK, ConfigurationError


@pytest.fixture
def settings_file(tmp_path):
    path = tmp_path / "configuration.json"
    path.write_text(json.dumps({"engine": {"log_dir": str(tmp_path / "logs"), "output_root": str(tmp_path / "runs")}}))
    return path


def test_settings_defaults():
    settings = main.EngineSettings.from_file(None)
    assert settings.threads == 1
    assert settings.log_level == "INFO"


def test_settings_reject_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"engine": {"threads": 2, "colour": "blue"}}))
    with pytest.raises(ConfigurationError, match="unknown setting 'colour'"):
        main.EngineSettings.from_file(str(path))


def test_settings_reject_bad_threads(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"threads": 0}))
    with pytest.raises(ConfigurationError, match="threads"):
        main.EngineSettings.from_file(str(path))


def test_settings_report_json_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{\n  \"threads\": ,\n}")
    with pytest.raises(ConfigurationError, match="line 2"):
        main.EngineSettings.from_file(str(path))


def test_list_prints_catalog(settings_file, capsys):
    assert main.main(["--config", str(settings_file), "list"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "trickle-bed" in out
    assert "ice-melt-single" in out


def test_check_valid_scenario(settings_file, capsys):
    assert main.main(["--config", str(settings_file), "check", "ice-melt-single"]) == EXIT_OK
    assert "ice-melt-single: ok (ambient, 1 particle sets)" in capsys.readouterr().out


def test_invalid_scenario_exits_with_config_code(settings_file, tmp_path, capsys):
    scenario = tmp_path / "broken.yaml"
    scenario.write_text("name: broken\nfluid: {mode: ambient}\nnumerics: {dt: 0.0, t_end: 1.0}\n")
    assert main.main(["--config", str(settings_file), "check", str(scenario)]) == EXIT_CONFIG_ERROR
    err = capsys.readouterr().err
    assert "numerics.dt" in err


def test_bad_engine_settings_exit_code(tmp_path):
    path = tmp_path / "missing.json"
    assert main.main(["--config", str(path), "list"]) == EXIT_CONFIG_ERROR


def test_plots_without_summary(settings_file, tmp_path, capsys):
    assert main.main(["--config", str(settings_file), "plots", str(tmp_path)]) != EXIT_OK
    assert "summary.yaml" in capsys.readouterr().err


def test_log_file_is_written(settings_file, tmp_path):
    main.main(["--config", str(settings_file), "check", "trickle-bed"])
    assert (tmp_path / "logs" / "thermodem.log").exists()
