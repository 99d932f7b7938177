import json
import os

import numpy as np
import pytest

from matlrt.cli.config import Float, FloatGrid, AlternativeKindParser, RunConfig, \
    resolve_cache_dir, build_studies, Colors, CACHE_DIR_ENV
from matlrt.cli.main import main, format_json, EXIT_OK, EXIT_USER_ERROR, EXIT_NUMERICAL_ERROR
from matlrt.core import RelationalMatrix, RngStream, UserError
from matlrt.data_io import write_dense_matrix
from matlrt.lrt import read_sample_file
from matlrt.meanmodel import simulate_trade_panel
from matlrt.power import AlternativeKind
from matlrt.simulation import read_study_csv


@pytest.fixture(autouse=True)
def no_cache_env(monkeypatch):
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)


@pytest.fixture
def matrix_path(tmp_path):
    path = str(tmp_path / "y.csv")
    write_dense_matrix(path, RelationalMatrix(np.random.default_rng(1).standard_normal((5, 5))))
    return path


def read_text(path):
    with open(path, "r", encoding="utf-8") as file:
        return file.read()


def test_float_parser():
    assert Float.get_value("5%") == pytest.approx(0.05)
    assert Float.get_value("2,5%") == pytest.approx(0.025)
    assert Float.get_value("0.1") == 0.1
    with pytest.raises(UserError):
        Float.argparse_type("five")


def test_float_grid_parser():
    assert FloatGrid.get_value("0:1:3") == [0.0, 0.5, 1.0]
    assert FloatGrid.get_value("0.1, 0.2") == [0.1, 0.2]
    with pytest.raises(UserError):
        FloatGrid.argparse_type("0:1:x")


def test_alternative_kind_parser():
    assert AlternativeKindParser.get_value("sparse-pair") == AlternativeKind.SPARSE_PAIR
    assert AlternativeKindParser.get_value("SBM") == AlternativeKind.BLOCKMODEL
    with pytest.raises(UserError):
        AlternativeKindParser.argparse_type("ring")


def test_resolve_cache_dir_prefers_environment(tmp_path):
    flag = str(tmp_path / "flag")
    env = str(tmp_path / "env")
    assert resolve_cache_dir(flag, {}) == flag
    assert resolve_cache_dir(flag, {CACHE_DIR_ENV: env}) == env
    assert resolve_cache_dir(None, {}).endswith(os.path.join(".cache", "matlrt"))


def test_build_studies():
    studies = build_studies([
        {"kind": "exchangeable", "m": [5, 6]},
        {"kind": "exchangeable", "m": 5, "rho_r": "0:0.5:3", "rho_c": [0.0, 0.2]},
        {"kind": "sparse_pair", "m": 5, "rho": [0.5], "name": "pair"},
        {"kind": "blockmodel", "m": 5, "mu": 1.0},
    ])
    assert [study.name for study in studies] == [
        "exchangeable_1_m5", "exchangeable_1_m6", "exchangeable_2_m5", "pair_m5",
        "blockmodel_4_m5"]
    assert [len(study.alts) for study in studies] == [49, 49, 6, 1, 1]
    with pytest.raises(UserError):
        build_studies([{"kind": "sparse_pair", "m": 5}])
    with pytest.raises(UserError):
        build_studies([{"kind": "blockmodel"}])


def test_run_config_validation(tmp_path, matrix_path):
    config = RunConfig("test", {"input": matrix_path, "S": 200, "seed": 3})
    assert config.spec_for(5).S == 200
    assert config.workers == -1
    with pytest.raises(UserError):
        RunConfig("test", {"input": str(tmp_path / "absent.csv")})
    with pytest.raises(UserError):
        RunConfig("test", {"level": 1.5})
    with pytest.raises(UserError):
        RunConfig("test", {"S": 10})
    with pytest.raises(UserError):
        RunConfig("test", {"output": str(tmp_path / "no" / "such" / "report.json")})


def test_run_config_yaml_applies_where_no_flag(tmp_path):
    path = tmp_path / "run.yml"
    path.write_text("S: 300\nseed: 9\nn_reps: 50\nstudies:\n  - kind: blockmodel\n    m: 5\n"
                    "    mu: 0:1:2\n", encoding="utf-8")
    config = RunConfig("power", {"config": str(path), "seed": 4})
    assert config.S == 300
    assert config.seed == 4
    assert config.n_reps == 50
    assert config.options["studies"][0]["kind"] == "blockmodel"


def test_format_json():
    text = format_json({"b": 0.1, "a": [1, True, None], "c": float("nan"), "d": {}})
    assert text == '{\n  "a": [\n    1,\n    true,\n    null\n  ],\n  "b": 0.10000000000000001,' \
                   '\n  "c": null,\n  "d": {}\n}'
    assert json.loads(text)["b"] == 0.1


def test_test_command_writes_identical_reports(tmp_path, matrix_path):
    cache_dir = str(tmp_path / "cache")
    outputs = [str(tmp_path / "first.json"), str(tmp_path / "second.json")]
    for output in outputs:
        assert main(["test", "--input", matrix_path, "--S", "100", "--seed", "1", "--workers",
                     "1", "--cache-dir", cache_dir, "--output", output]) == EXIT_OK
    assert read_text(outputs[0]) == read_text(outputs[1])
    report = json.loads(read_text(outputs[0]))
    assert report["schema_version"] == 1
    assert report["spec"]["m"] == 5
    assert 0 < report["p_value"] <= 1
    assert "cache_hit" not in report
    assert len(os.listdir(cache_dir)) == 1


def test_test_command_uses_cache_environment(tmp_path, matrix_path, monkeypatch):
    env_dir = tmp_path / "env"
    monkeypatch.setenv(CACHE_DIR_ENV, str(env_dir))
    assert main(["test", "--input", matrix_path, "--S", "100", "--workers", "1",
                 "--cache-dir", str(tmp_path / "flag"), "--output",
                 str(tmp_path / "report.json")]) == EXIT_OK
    assert len(os.listdir(env_dir)) == 1
    assert not (tmp_path / "flag").exists()


def test_test_command_with_replicates(tmp_path, matrix_path):
    second = str(tmp_path / "y2.csv")
    write_dense_matrix(second, RelationalMatrix(np.random.default_rng(2).standard_normal((5, 5))))
    output = str(tmp_path / "report.json")
    assert main(["test", "--replicates", matrix_path, second, "--heteroscedastic",
                 "--S", "100", "--workers", "1", "--cache-dir", str(tmp_path),
                 "--output", output]) == EXIT_OK
    spec = json.loads(read_text(output))["spec"]
    assert spec["p"] == 2 and spec["heteroscedastic"]


def test_test_command_with_covariates(tmp_path):
    ys, design = simulate_trade_panel(5, 2, rng=RngStream(2))
    rows = ["i,j,k,y,x_intercept,x_row,x_col"]
    for k, y in enumerate(ys):
        for i in range(5):
            for j in range(5):
                if i != j:
                    x = ",".join(format(value, ".17g") for value in design.covariates[k, i, j])
                    rows.append(f"{i},{j},{k},{y.entries[i, j]:.17g},{x}")
    panel = tmp_path / "panel.csv"
    panel.write_text("\n".join(rows) + "\n", encoding="utf-8")
    output = str(tmp_path / "report.json")
    assert main(["test", "--covariates", str(panel), "--missing-diagonal", "--S", "100",
                 "--workers", "1", "--cache-dir", str(tmp_path), "--output", output]) == EXIT_OK
    report = json.loads(read_text(output))
    assert report["approximate_null"]
    assert report["spec"]["heteroscedastic"] and report["spec"]["missing_diagonal"]
    assert report["covariates"] == ["x_intercept", "x_row", "x_col"]


def test_exit_codes(tmp_path, capsys):
    assert main(["test", "--input", str(tmp_path / "absent.csv")]) == EXIT_USER_ERROR
    assert f"{Colors.FAIL}Error: " in capsys.readouterr().err
    assert main(["test", "--S", "100"]) == EXIT_USER_ERROR
    assert main(["test", "--level", "150%"]) == EXIT_USER_ERROR
    ones = str(tmp_path / "ones.csv")
    write_dense_matrix(ones, RelationalMatrix(np.ones((4, 4))))
    assert main(["test", "--input", ones, "--S", "100", "--workers", "1",
                 "--cache-dir", str(tmp_path)]) == EXIT_NUMERICAL_ERROR
    assert f"{Colors.FAIL}Numerical failure: " in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_null_command_is_byte_identical(tmp_path):
    outputs = [str(tmp_path / "a.bin"), str(tmp_path / "b.bin")]
    for output, workers in zip(outputs, ("1", "2")):
        assert main(["null", "--m", "4", "--S", "100", "--seed", "5", "--workers", workers,
                     "--output", output]) == EXIT_OK
    with open(outputs[0], "rb") as first, open(outputs[1], "rb") as second:
        assert first.read() == second.read()
    header, values = read_sample_file(outputs[0])
    assert header["m"] == 4 and header["S"] == 100 and header["seed"] == 5
    assert len(values) == 100


def test_null_command_fills_cache(tmp_path):
    assert main(["null", "--m", "4", "--p", "2", "--S", "100", "--workers", "1",
                 "--cache-dir", str(tmp_path)]) == EXIT_OK
    assert os.listdir(tmp_path) == ["null_m4_p2_md0_h0_S100_seed0.bin"]
    assert main(["null", "--m", "4", "5", "--S", "100"]) == EXIT_USER_ERROR


def test_null_command_table(tmp_path):
    output = str(tmp_path / "table.csv")
    assert main(["null", "--table", "--m", "4", "5", "--S", "100", "--workers", "1",
                 "--cache-dir", str(tmp_path / "cache"), "--output", output]) == EXIT_OK
    assert read_study_csv(output)["m"].tolist() == [4, 5]


def test_power_command_with_flags(tmp_path):
    assert main(["power", "--kind", "sparse", "--m", "4", "--grid", "0,0.9", "--n-reps", "10",
                 "--S", "100", "--workers", "1", "--cache-dir", str(tmp_path / "cache"),
                 "--output", str(tmp_path)]) == EXIT_OK
    table = read_study_csv(str(tmp_path / "sparse_pair_m4.csv"))
    assert table["rho"].tolist() == [0.0, 0.9]
    assert table["n_reps"].tolist() == [10, 10]
    assert main(["power", "--kind", "blockmodel", "--m", "4", "--S", "100",
                 "--output", str(tmp_path)]) == EXIT_USER_ERROR


def test_power_command_with_configuration(tmp_path):
    config = tmp_path / "power.yml"
    config.write_text("S: 100\nn_reps: 5\nworkers: 1\nstudies:\n  - kind: blockmodel\n"
                      "    name: block\n    m: 4\n    mu: 0:2:3\n", encoding="utf-8")
    assert main(["power", "--config", str(config), "--cache-dir", str(tmp_path / "cache"),
                 "--output", str(tmp_path)]) == EXIT_OK
    table = read_study_csv(str(tmp_path / "block_m4.csv"))
    assert table["mu"].tolist() == [0.0, 1.0, 2.0]
    assert table["n_reps"].tolist() == [5, 5, 5]


def test_eigen_command_writes_one_row_per_retained_state(tmp_path):
    edges = tmp_path / "edges.csv"
    edges.write_text("source,target\n0,1\n1,2\n2,3\n3,4\n4,5\n5,0\n0,3\n2,5\n",
                     encoding="utf-8")
    output = str(tmp_path / "fuzzy.csv")
    assert main(["eigen", "--edge-list", str(edges), "--m", "6", "--missing-diagonal",
                 "--rank", "1", "--n-iter", "300", "--burn-in", "100", "--thin", "1",
                 "--S", "100", "--workers", "1", "--cache-dir", str(tmp_path / "cache"),
                 "--output", output]) == EXIT_OK
    table = read_study_csv(output)
    assert len(table) == 200
    assert table["p_value"].between(0, 1).all()


def test_demean_command(tmp_path):
    rows = ["i,j,k,y,x_1"]
    generator = np.random.default_rng(3)
    for i in range(4):
        for j in range(4):
            if i != j:
                rows.append(f"{i},{j},0,{2.0 * i + generator.normal()},{float(i)}")
    panel = tmp_path / "panel.csv"
    panel.write_text("\n".join(rows) + "\n", encoding="utf-8")
    output = str(tmp_path / "residuals.csv")
    assert main(["demean", "--covariates", str(panel), "--missing-diagonal",
                 "--output", output]) == EXIT_OK
    coefficients = json.loads(read_text(str(tmp_path / "residuals.beta.json")))["coefficients"]
    assert list(coefficients) == ["x_1"]
    assert coefficients["x_1"]["standard_error"] > 0
    assert len(read_text(output).splitlines()) == 1 + 12
    assert main(["demean", "--covariates", str(panel)]) == EXIT_USER_ERROR
