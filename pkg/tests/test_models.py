import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from paralab import models, settings
from paralab.errors import ConfigError
from paralab.models import DecompositionReport, EstimateSuiteSpec, ExperimentConfig, GridSpec, LeibnizRow

BASE = {
    "experiment": "leibniz_sweep",
    "space": {"kind": "grid", "dims": [16]},
    "sampler": {"seed": 1},
}


def test_defaults():
    config = ExperimentConfig.model_validate(BASE)
    assert config.operator.kind == "graph_laplacian"
    assert config.calculus.p0 == 2.0
    assert config.quadrature.nodes_per_decade == 40
    assert config.grid.alpha == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert config.sampler.count == 32
    assert config.seed == 1


def test_seed_is_required():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({**BASE, "sampler": {"count": 4}})


def test_grid_values_are_sorted_and_checked():
    assert GridSpec(p=[4.0, 1.5, 4.0], alpha=[0.5, 0.25]).p == [1.5, 4.0]
    with pytest.raises(ValidationError):
        GridSpec(p=[1.0])
    with pytest.raises(ValidationError):
        GridSpec(alpha=[1.0])


def test_eta_grid_must_be_symmetric():
    assert EstimateSuiteSpec(imaginary_eta=[2.0, -2.0]).imaginary_eta == [-2.0, 2.0]
    with pytest.raises(ValidationError):
        EstimateSuiteSpec(imaginary_eta=[-1.0, 2.0])


def test_operator_needs_a_grid():
    data = {**BASE, "space": {"kind": "graph", "edges": [[0, 1, 1.0]]}, "operator": {"kind": "delta_a"}}
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(data)
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({**BASE, "space": {"kind": "graph"}})


def test_complex_coefficients():
    data = {
        **BASE,
        "operator": {"kind": "divergence_form", "A_constant": [["1", "0.5j"], [[0.0, -0.5], 1.0]], "a_constant": "1 + 2j"},
        "space": {"kind": "grid", "dims": [4, 4]},
    }
    config = ExperimentConfig.model_validate(data)
    assert config.operator.A_constant[0][1] == 0.5j
    assert config.operator.A_constant[1][0] == -0.5j
    dumped = config.model_dump(mode="json")["operator"]
    assert dumped["A_constant"][0] == ["(1+0j)", "0.5j"]
    assert dumped["a_constant"] == "(1+2j)"


def test_with_seed_leaves_the_original():
    config = ExperimentConfig.model_validate(BASE)
    other = config.with_seed(42)
    assert other.seed == 42
    assert config.seed == 1


def test_from_file_resolves_relative_paths(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'experiment = "verify_assumptions"\n[space]\nkind = "graph"\nedges_file = "data/g.edges"\n[sampler]\nseed = 0\n'
    )
    config = ExperimentConfig.from_file(path)
    assert config.resolve(config.space.edges_file) == tmp_path / "data" / "g.edges"
    assert config.resolve("/abs/file") == Path("/abs/file")
    assert config.resolve(None) is None


def test_from_file_reports_field_paths(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('experiment = "decomposition"\n[space]\ndims = [8]\nh = -1.0\n[sampler]\nseed = 0\n')
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_file(path)
    assert "space.h" in str(info.value)
    bad_syntax = tmp_path / "syntax.toml"
    bad_syntax.write_text("experiment = \n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(bad_syntax)


def test_from_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"experiment": "decomposition", "space": {"dims": [8]}, "sampler": {"seed": 2}}')
    assert ExperimentConfig.from_file(path).seed == 2


def test_leibniz_row_ordering():
    row = dict(row_id=0, p=2.0, alpha=0.5, n_samples=4, stability=0.0, argmax_sample=1,
               inside_thm13=True, inside_previous=True)
    LeibnizRow(max_ratio=1.0, mean_ratio=0.5, **row)
    with pytest.raises(ValidationError):
        LeibnizRow(max_ratio=0.5, mean_ratio=1.0, **row)


def test_decomposition_report_arrays():
    report = DecompositionReport(
        pi_resonant=[0.0, 0.0], pi_g_f=np.array([0.5, 0.5]), pi_f_g=np.array([0.5 + 1j, 0.5]),
        residual_p=1e-9, residual_refined=1e-12,
    )
    assert not report.pi_g_f.flags.writeable
    dumped = report.model_dump(mode="json")
    assert dumped["pi_g_f"] == [0.5, 0.5]
    assert dumped["pi_f_g"] == {"real": [0.5, 0.5], "imag": [1.0, 0.0]}


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("PARALAB_MAX_POINTS", "100")
    monkeypatch.setenv("PARALAB_LOG_LEVEL", "debug")
    settings.reset()
    current = settings.get_settings()
    assert current.max_points == 100
    assert current.log_level == "DEBUG"
    assert current.threads == 1


def test_malformed_settings_fall_back(monkeypatch):
    monkeypatch.setenv("PARALAB_THREADS", "many")
    settings.reset()
    assert settings.get_settings().threads == 1


def test_toml_reader_matches_interpreter():
    reader = models.tomllib
    assert reader.__name__ == ("tomllib" if sys.version_info >= (3, 11) else "tomli")
    assert reader.loads('seed = 3\n[space]\ndims = [8]\n') == {"seed": 3, "space": {"dims": [8]}}
