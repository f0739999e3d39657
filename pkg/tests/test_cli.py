import json

import pandas as pd
import pytest

from ulu_kit.cli import main

SMALL_TRAINING = ["--synthetic", "--model", "mlp", "--epochs", "1", "--train-n", "40", "--test-n", "20",
                  "--batch-size", "20"]


@pytest.fixture(autouse=True)
def no_data_dir(monkeypatch):
    monkeypatch.delenv("ULU_DATA_DIR", raising=False)


def test_check_gradients_default_library(tmp_path):
    assert main(["check-gradients", "--out-dir", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "gradient_check.csv")
    assert table["passed"].all()
    points = dict(zip(table["activation"] + " " + table["quantity"], table["points"]))
    assert points["gelu dx"] == 2001
    assert points["elu dx"] == points["ulu(0.3,0.8) dx"] == 2000


def test_check_gradients_selected_activations(tmp_path):
    code = main(["check-gradients", "--grid-points", "201", "--activation", "ulu(0.3,0.8)",
                 "--activation", "mish", "--out-dir", str(tmp_path)])
    assert code == 0
    table = pd.read_csv(tmp_path / "gradient_check.csv")
    assert table["activation"].tolist() == ["ulu(0.3,0.8)", "mish"]
    assert table["passed"].all()


def test_train_writes_run_files(tmp_path, capsys):
    code = main(["train", *SMALL_TRAINING, "--activation", "aulu", "--save-params", "--out-dir", str(tmp_path)])
    assert code == 0
    run = json.loads((tmp_path / "run.json").read_text())
    assert [row["epoch"] for row in run["epochs"]] == [0, 1]
    assert run["config"]["model"]["activation"] == "aulu"
    assert len(pd.read_csv(tmp_path / "curves.csv")) == 2
    assert len(pd.read_csv(tmp_path / "betas.csv")) == 2
    assert (tmp_path / "params.bin").read_bytes()[:4] == b"ULUK"
    assert "final_test_acc=" in capsys.readouterr().out


def test_train_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["train", *SMALL_TRAINING, "--out-dir", str(tmp_path / name)]) == 0
    for name in ("run.json", "curves.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_echo(tmp_path):
    main(["train", *SMALL_TRAINING, "--seed", "3", "--out-dir", str(tmp_path)])
    config = json.loads((tmp_path / "config.json").read_text())
    assert config["subcommand"] == "train"
    assert config["seed"] == 3
    assert config["activation"] == "ulu(0.3,0.8)"
    assert config["out_dir"] == str(tmp_path)


def test_sweep_grid(tmp_path):
    code = main(["sweep", *SMALL_TRAINING, "--alphas", "0.3,0.8", "--excel", "--out-dir", str(tmp_path)])
    assert code == 0
    table = pd.read_csv(tmp_path / "sweep.csv")
    assert list(table.columns) == ["alpha1", "alpha2", "final_test_acc", "diverged"]
    assert len(table) == 4
    assert (tmp_path / "sweep.xlsx").read_bytes()[:2] == b"PK"


def test_landscape_files(tmp_path):
    code = main(["landscape", "--resolution", "16", "--activation", "relu", "--activation", "ulu(0.3,0.8)",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "landscape_relu.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")
    assert len((tmp_path / "landscape_ulu_0_3_0_8.csv").read_text().splitlines()) == 16
    summary = pd.read_csv(tmp_path / "landscape_summary.csv")
    assert summary["weights_sha256"].nunique() == 1


def test_compare_table(tmp_path):
    code = main(["compare", *SMALL_TRAINING, "--activation", "relu", "--activation", "silu", "--repeats", "1",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    table = pd.read_csv(tmp_path / "compare.csv")
    assert sorted(table["activation"]) == ["relu", "silu"]


def test_curves_files(tmp_path):
    code = main(["curves", "--points", "11", "--out-dir", str(tmp_path)])
    assert code == 0
    frame = pd.read_csv(tmp_path / "curves.csv")
    assert list(frame.columns) == ["x", "f", "df", "d2f"]
    assert frame["x"].iloc[5] == 0.0
    assert frame["df"].iloc[5] == 0.5
    assert len(pd.read_csv(tmp_path / "approximations.csv")) == 4


def test_curves_non_ulu_has_no_second_derivative(tmp_path):
    assert main(["curves", "--activation", "gelu", "--points", "5", "--out-dir", str(tmp_path)]) == 0
    assert pd.read_csv(tmp_path / "curves.csv")["d2f"].isna().all()


def test_curves_rejects_empty_range(tmp_path):
    assert main(["curves", "--lo", "1", "--hi", "1", "--out-dir", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--no-such-flag"],
    ["train", "--activation", "ulu(0,1)"],
    ["sweep", "--alphas", "0.3,-1"],
    ["frobnicate"],
    [],
])
def test_usage_errors(argv, tmp_path):
    assert main([*argv, "--out-dir", str(tmp_path)] if argv else argv) == 2


def test_missing_data_source(tmp_path):
    assert main(["train", "--model", "mlp", "--epochs", "0", "--out-dir", str(tmp_path)]) == 2


def test_missing_data_files(tmp_path):
    assert main(["train", "--data-dir", str(tmp_path / "nowhere"), "--out-dir", str(tmp_path)]) == 2


def test_lib_report_rejects_fixed_activation(tmp_path):
    assert main(["lib-report", "--synthetic", "--activation", "relu", "--out-dir", str(tmp_path)]) == 2


def test_invalid_training_config_is_usage_error(tmp_path):
    assert main(["train", *SMALL_TRAINING, "--momentum", "1.5", "--out-dir", str(tmp_path)]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert "ulu-kit 0.1.0" in capsys.readouterr().out


def test_lib_report_with_frozen_betas(tmp_path, capsys):
    code = main(["lib-report", "--synthetic", "--freeze-betas", "--epochs", "1", "--train-n", "20", "--test-n", "10",
                 "--batch-size", "10", "--out-dir", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "lib_report.json").read_text())
    assert set(report["models"]) == {"cnn", "attn"}
    for entry in report["models"].values():
        assert entry["aggregate_lib"] == 0.0
        assert all(site["lib"] == 0.0 for site in entry["sites"])
    assert capsys.readouterr().out.startswith("observation: ")


def test_landscape_without_interior_points(tmp_path):
    assert main(["landscape", "--resolution", "2", "--activation", "relu", "--out-dir", str(tmp_path)]) == 0
    assert pd.read_csv(tmp_path / "landscape_summary.csv")["smoothness"].isna().all()


def test_unknown_log_level_falls_back_to_info(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ULU_LOG_LEVEL", "chatty")
    assert main(["curves", "--points", "5", "--out-dir", str(tmp_path)]) == 0
    assert "Ignoring unknown ULU_LOG_LEVEL='chatty'" in capsys.readouterr().err
