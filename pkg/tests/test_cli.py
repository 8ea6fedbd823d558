import json
from pathlib import Path

import pytest

from paralab import cli
from paralab.reports import load_report

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_path_graph_verification_passes(tmp_path, capsys):
    assert cli.main(["run", str(CONFIGS / "p3_verify.toml"), "--out", str(tmp_path)]) == 0
    report = load_report(tmp_path)
    assert report["experiment"] == "verify_assumptions"
    assert report["violations"] == 0
    assert (tmp_path / "tables" / "assumptions.csv").exists()
    assert (tmp_path / "summary.md").exists()
    assert "Finished" in capsys.readouterr().out


def test_two_point_decomposition(tmp_path):
    assert cli.main(["run", str(CONFIGS / "k2_decomposition.toml"), "--out", str(tmp_path)]) == 0
    report = load_report(tmp_path)["report"]
    assert report["max_residual"] <= 1e-6


def test_missing_seed_is_a_config_error(tmp_path, capsys):
    config = tmp_path / "broken.toml"
    config.write_text('experiment = "decomposition"\n\n[space]\nkind = "grid"\ndims = [8]\n\n[sampler]\ncount = 1\n')
    assert cli.main(["run", str(config), "--out", str(tmp_path / "out")]) == 1
    assert "sampler.seed" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_unreadable_config(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "absent.toml")]) == 1
    assert "ConfigError" in capsys.readouterr().err


def test_replay_writes_a_single_row(tmp_path):
    args = ["run", str(CONFIGS / "k2_decomposition.toml"), "--out", str(tmp_path), "--replay", "decomposition", "0"]
    assert cli.main(args) == 0
    replay = json.loads((tmp_path / "replay" / "decomposition-0.json").read_text())
    assert replay["row"]["row_id"] == 0
    assert replay["row"]["residual_p"] <= 1e-6
    assert not (tmp_path / "report.json").exists()


def test_replay_row_must_be_an_integer(tmp_path):
    args = ["run", str(CONFIGS / "k2_decomposition.toml"), "--out", str(tmp_path), "--replay", "decomposition", "x"]
    assert cli.main(args) == 1


def test_seed_override(tmp_path):
    args = ["run", str(CONFIGS / "k2_decomposition.toml"), "--out", str(tmp_path), "--seed-override", "9"]
    assert cli.main(args) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 9
    assert cli.main(args[:-1] + ["-1"]) == 1


def test_violations_set_exit_code(tmp_path, monkeypatch):
    real = cli.run_experiment
    monkeypatch.setattr(
        cli, "run_experiment", lambda config, threads=None: real(config, threads).model_copy(update={"violations": 3}),
    )
    config = CONFIGS / "p3_verify.toml"
    assert cli.main(["run", str(config), "--out", str(tmp_path), "--threads", "2"]) == 2


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args([])
