import csv
import json

import numpy as np
import pytest

from srnet import cli, linalg
from srnet.experiments.commands import SCHEMAS

SMALL = {
    "srank-gaussian": {"sizes": [20, 40], "alphas": [1.0, 0.5], "draws": 2},
    "normality": {"widths": [16, 32], "draws": 200, "seeds": 2},
    "gp-ntk": {"n_points": 3,
               "gp": {"width": 40, "input_dim": 40, "depth": 2, "stable_rank": 4.0, "inits": 4},
               "ntk": {"width": 30, "input_dim": 30, "outputs": 3, "depth": 2, "stable_rank": 3.0,
                       "output_stable_rank": 1.5},
               "drift": {"widths": [30, 10], "steps": 5, "seeds": 2}},
    "curve": {"width": 20, "depth": 2, "stable_ranks": [2.0, 10.0], "spectral_norm": 4.0, "seeds": 2,
              "n_points": 32},
    "toy-training": {"steps": 200, "record_every": 50},
    "mnist": {"train_size": 60, "test_size": 40, "hidden": 24,
              "noise": {"srank_targets": [2.0, 6.0], "seeds": 2, "epochs": 1, "batch_size": 20},
              "regularization": {"models": 2, "batch_size": 20, "l1": [0.0, 1e-4], "l2": [1e-3],
                                 "srank_init": [3.0]}},
    "sample": {"n_out": 12, "n_in": 8, "stable_rank": 3.0, "spectral_norm": 2.0, "count": 3},
}

OUTPUTS = {
    "srank-gaussian": ["srank_gaussian.csv", "srank_gaussian.json", "srank_gaussian.png"],
    "normality": ["normality.csv", "qq.csv", "normality_summary.json", "qq.png"],
    "gp-ntk": ["gp_ntk.csv", "ntk_drift.csv", "gp_trace.json", "ntk_trace.json", "ntk_theory.bin",
               "gp_ntk_summary.json", "gp_ntk.png", "ntk_drift.png"],
    "curve": ["curve_lengths.csv", "curve_r2.csv", "curve_r10.csv", "curve_summary.json", "curve_lengths.png"],
    "toy-training": ["toy_training.csv", "toy_training_summary.json", "toy_training.png"],
    "mnist": ["noise_runs.csv", "noise.csv", "regularization.csv", "mnist_summary.json", "noise_fitting.png",
              "regularization.png"],
    "sample": ["sample.csv", "weight_000.bin", "weight_002.bin"],
}


def write_config(path, params, seed=5, **extra):
    path.write_text(json.dumps({"experiment": dict(seed=seed, params=params, **extra)}))
    return str(path)


def run_cli(tmp_path, command, params, out="out", **extra):
    cfg = write_config(tmp_path / f"{command}.json", params, **extra)
    out_dir = tmp_path / out
    return cli.main([command, "--config", cfg, "--out", str(out_dir)]), out_dir


@pytest.mark.parametrize("command", sorted(SMALL))
def test_command_outputs_and_schemas(tmp_path, command, capsys):
    code, out_dir = run_cli(tmp_path, command, SMALL[command])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["command"] == command
    for name in OUTPUTS[command]:
        assert (out_dir / name).stat().st_size > 0, name
        if name in SCHEMAS:
            with open(out_dir / name) as f:
                rows = list(csv.reader(f))
            assert tuple(rows[0]) == SCHEMAS[name]
            assert len(rows) > 1 and all(len(r) == len(rows[0]) for r in rows)


def test_rerun_is_byte_identical(tmp_path):
    for command in ("sample", "curve", "mnist"):
        _, a = run_cli(tmp_path, command, SMALL[command], out=f"{command}_a")
        _, b = run_cli(tmp_path, command, SMALL[command], out=f"{command}_b")
        for f in a.iterdir():
            if f.suffix in (".csv", ".bin", ".json"):
                assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_seed_override_changes_output(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL["sample"])
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["sample", "--config", cfg, "--seed", "6", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/weight_000.bin").read_bytes() != (tmp_path / "b/weight_000.bin").read_bytes()


def test_sampled_weights_hit_targets(tmp_path):
    code, out_dir = run_cli(tmp_path, "sample", dict(SMALL["sample"], format="csv"))
    assert code == 0
    for i in range(3):
        w = linalg.load_matrix_csv(out_dir / f"weight_{i:03d}.csv")
        assert w.shape == (12, 8)
        assert abs(linalg.stable_rank(w) - 3.0) <= 1e-8
        assert abs(linalg.spectral_norm(w) - 2.0) <= 1e-8


def test_exit_code_config_errors(tmp_path):
    assert run_cli(tmp_path, "sample", {"bogus": 1})[0] == 2
    assert run_cli(tmp_path, "sample", {"format": "xml"})[0] == 2
    assert run_cli(tmp_path, "sample", {"stable_rank": 100.0})[0] == 2
    cfg = tmp_path / "noseed.json"
    cfg.write_text(json.dumps({"experiment": {"params": {}}}))
    assert cli.main(["sample", "--config", str(cfg)]) == 2
    assert cli.main(["no-such-command", "--config", str(cfg)]) == 2
    assert cli.main(["sample"]) == 2


def test_exit_code_numerical_failure(tmp_path):
    params = {"n_out": 64, "n_in": 64, "stable_rank": 40.0, "spectral_norm": 1.0, "max_attempts": 5,
              "method": "sphere", "count": 1}
    assert run_cli(tmp_path, "sample", params)[0] == 3


def test_exit_code_data_error(tmp_path):
    params = dict(SMALL["mnist"], images=str(tmp_path / "missing-images"), labels=str(tmp_path / "missing-labels"))
    assert run_cli(tmp_path, "mnist", params)[0] == 4
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x01" + bytes(8))
    params = dict(SMALL["mnist"], images=str(bad), labels=str(bad))
    assert run_cli(tmp_path, "mnist", params)[0] == 4


def test_toy_csv_records_every_step_count(tmp_path):
    code, out_dir = run_cli(tmp_path, "toy-training", SMALL["toy-training"])
    assert code == 0
    with open(out_dir / "toy_training.csv") as f:
        rows = list(csv.DictReader(f))
    steps = sorted({int(r["step"]) for r in rows})
    assert steps == [0, 50, 100, 150, 200]
    assert {r["run"] for r in rows} >= {"unconstrained"}
    assert np.all(np.isfinite([float(r["loss"]) for r in rows]))
