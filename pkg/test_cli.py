#!/usr/bin/env python3
"""
CLI tests - run, quantize and expm-check on small experiment files
"""
import io
import json

import pandas as pd
import pytest
from click.testing import CliRunner

from backmc import __version__
from backmc.cli import cli
from backmc.runner import RESULT_COLUMNS


def cev_config(**overrides):
    config = {
        "name": "small_cev",
        "model": {"kind": "cev", "x0": 1.36, "r": 0.0032, "sigma": 0.1, "alpha": 0.5},
        "time": {"T": 0.5, "n": 4},
        "chain": {"builder": "rmqa", "N": 8, "tol": 1e-6},
        "payoffs": [
            {"kind": "up_out_barrier_call", "K": 1.36, "B": 1.45, "label": "ATM"},
            {"kind": "asian_call", "K": 1.36, "label": "asian"},
        ],
        "run": {"n_mc": 400, "seed": 1, "estimators": ["euler", "backward"]},
    }
    config.update(overrides)
    return config


def lv_config():
    return {
        "name": "small_lv",
        "model": {
            "kind": "local_vol",
            "x0": 1.0,
            "segments": [
                {"end_time": 0.25, "x": [0.8, 1.0, 1.2], "eta": [0.12, 0.10, 0.11]},
                {"end_time": 0.5, "x": [0.8, 1.0, 1.2], "eta": [0.14, 0.12, 0.13]},
            ],
        },
        "time": {"dates": [0.0, 0.25, 0.5]},
        "chain": {"builder": "ltsa", "N": 30},
        "payoffs": [{"kind": "vanilla_call", "K": 1.0}, {"kind": "vanilla_put", "K": 1.0}],
        "run": {"n_mc": 300, "seed": 2},
    }


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def write_config(tmp_path):
    def write(config, name="experiment.json"):
        path = tmp_path / name
        path.write_text(config if isinstance(config, str) else json.dumps(config))
        return path
    return write


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_run_writes_artifacts(runner, write_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(cli, ["run", str(write_config(cev_config())), "--out-dir", str(out), "--dump-paths", "5"])
    assert result.exit_code == 0, result.output
    assert "Run complete" in result.output
    assert "estimate" in result.output
    assert "small_cev" in (out / "summary.txt").read_text()
    frame = pd.read_csv(out / "results.csv")
    assert list(frame.columns) == RESULT_COLUMNS
    assert len(frame) == 2 * 2
    assert set(frame["estimator"]) == {"euler", "backward"}
    assert (frame["ci_low"] <= frame["price"]).all()
    for name in ("chain_grids.csv", "chain_transitions.csv", "chain_diagnostics.csv", "summary.txt"):
        assert (out / name).exists()
    assert len(pd.read_csv(out / "paths.csv")) == 5


def test_rerun_is_byte_identical(runner, write_config, tmp_path):
    config = write_config(cev_config())
    for name in ("a", "b"):
        result = runner.invoke(cli, ["run", str(config), "--out-dir", str(tmp_path / name), "--threads", "2"])
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def csv_block(output, rows):
    lines = output.splitlines()
    header = next(i for i, line in enumerate(lines) if line.startswith("experiment,"))
    return pd.read_csv(io.StringIO("\n".join(lines[header:header + rows + 1])))


def test_csv_format(runner, write_config):
    result = runner.invoke(cli, ["run", str(write_config(cev_config())), "--format", "csv"])
    assert result.exit_code == 0, result.output
    assert list(csv_block(result.output, 4)["estimator"]) == ["euler", "backward"] * 2


def test_seed_flag_overrides_config(runner, write_config):
    config = write_config(cev_config())
    prices = [
        csv_block(runner.invoke(cli, ["run", str(config), "--format", "csv", "--seed", str(seed)]).output, 4)
        for seed in (1, 2)
    ]
    euler = [frame[frame["estimator"] == "euler"]["price"].tolist() for frame in prices]
    assert euler[0] != euler[1]


def test_volatility_sweep(runner, write_config, tmp_path):
    config = cev_config()
    config["model"]["sigma"] = [0.05, 0.1]
    config["payoffs"] = config["payoffs"][:1]
    out = tmp_path / "sweep"
    result = runner.invoke(cli, ["run", str(write_config(config)), "--out-dir", str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "results.csv")
    assert frame["model"].nunique() == 2
    assert len(frame) == 2 * 2
    assert (out / "chain0_grids.csv").exists() and (out / "chain1_grids.csv").exists()


def test_vanilla_run_adds_scalar_price(runner, write_config, tmp_path):
    out = tmp_path / "lv"
    result = runner.invoke(cli, ["run", str(write_config(lv_config())), "--out-dir", str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "results.csv")
    assert len(frame) == 2 * 3
    scalar = frame[frame["estimator"] == "scalar"]
    assert len(scalar) == 2
    assert (scalar["std_error"] == 0).all()


def test_missing_field_is_a_config_error(runner, write_config):
    config = cev_config()
    del config["model"]["x0"]
    result = runner.invoke(cli, ["run", str(write_config(config))])
    assert result.exit_code == 2
    assert "model.x0" in result.output


def test_unknown_field_is_rejected(runner, write_config):
    result = runner.invoke(cli, ["run", str(write_config(cev_config(extra=True)))])
    assert result.exit_code == 2
    assert "extra" in result.output


def test_invalid_json_reports_position(runner, write_config):
    result = runner.invoke(cli, ["run", str(write_config('{\n  "name": ,\n}'))])
    assert result.exit_code == 2
    assert "line 2" in result.output


def test_invalid_yaml_reports_position(runner, write_config):
    result = runner.invoke(cli, ["run", str(write_config("name: [unclosed\nmodel: {}\n", "bad.yaml"))])
    assert result.exit_code == 2
    assert "invalid YAML" in result.output


def test_bad_thread_environment(runner, write_config, monkeypatch):
    monkeypatch.setenv("BACKMC_THREADS", "many")
    result = runner.invoke(cli, ["run", str(write_config(cev_config()))])
    assert result.exit_code == 2
    assert "BACKMC_THREADS" in result.output


def test_euler_needs_rmqa_chain(runner, write_config):
    config = lv_config()
    config["run"]["estimators"] = ["euler"]
    result = runner.invoke(cli, ["run", str(write_config(config))])
    assert result.exit_code == 2
    assert "run.estimators" in result.output


def test_quantize_dumps_chain(runner, write_config, tmp_path):
    out = tmp_path / "chain"
    result = runner.invoke(cli, ["quantize", str(write_config(cev_config())), "--out-dir", str(out)])
    assert result.exit_code == 0, result.output
    grids = pd.read_csv(out / "small_cev_grids.csv")
    assert list(grids.columns) == ["slice", "node", "time", "point", "marginal"]
    assert len(grids) == 1 + 4 * 8
    assert (out / "small_cev_transitions.csv").exists()
    assert (out / "small_cev_diagnostics.csv").exists()


def test_expm_check(runner, write_config, tmp_path):
    out = tmp_path / "expm"
    result = runner.invoke(cli, ["expm-check", str(write_config(lv_config())), "--out-dir", str(out)])
    assert result.exit_code == 0, result.output
    report = pd.read_csv(out / "expm_check.csv")
    assert list(report["segment"]) == [0, 1]
    assert (report["row_sum_error"] < 1e-9).all()
    assert (out / "generator_0.csv").exists() and (out / "generator_1.csv").exists()
