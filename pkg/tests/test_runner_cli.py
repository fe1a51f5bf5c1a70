"""Run orchestration artifacts, determinism, plot export, and the CLI."""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from adeinv.cli import main
from adeinv.runner import (
    export_plotdata,
    load_run_bundle,
    load_run_scenario,
    run,
)
from adeinv.scenarios import ConfigError, scenario_preset

MINI = {
    "grid_cells": 16, "n_steps": 32, "sensor_every": 8, "sensors": 4,
    "n_collocation": 32, "n_boundary": 8, "n_initial": 4,
    "widths_u": (3, 8, 1), "widths_f": (2, 8, 1),
    "adam_steps": 12, "lbfgs_steps": 3, "weight_update_every": 5,
    "kernel_subsample": 16, "log_every": 5,
}

EXPECTED_FILES = [
    "config.json", "observations.csv", "loss_history.csv", "weights.csv",
    "spectra.csv", "metrics.json", "params_final.bin", "manifest.json",
]


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    manifest = run("A1", dict(MINI), out)
    return out, manifest


def test_run_writes_expected_artifacts(mini_run):
    out, manifest = mini_run
    for name in EXPECTED_FILES:
        assert (out / name).exists(), name
    assert manifest.scenario_id == "A1"
    assert manifest.grid == {"dim": 2, "n_cells": 16, "n_steps": 32}


def test_manifest_digests_match_files(mini_run):
    out, manifest = mini_run
    for name, digest in manifest.files.items():
        actual = hashlib.sha256((out / name).read_bytes()).hexdigest()
        assert actual == digest, name


def test_config_roundtrip(mini_run):
    out, _ = mini_run
    sc = load_run_scenario(out)
    assert sc == scenario_preset("A1", dict(MINI))


def test_identical_seeds_identical_outputs(mini_run, tmp_path):
    out, manifest = mini_run
    second = run("A1", dict(MINI), tmp_path / "again")
    for name in ("metrics.json", "params_final.bin", "observations.csv",
                 "loss_history.csv", "weights.csv", "spectra.csv"):
        assert manifest.files[name] == second.files[name], name


def test_loaded_bundle_reproduces_metrics(mini_run):
    out, _ = mini_run
    sc = load_run_scenario(out)
    bundle = load_run_bundle(out, sc)
    from adeinv.metrics import evaluate
    stored = json.loads((out / "metrics.json").read_text())
    fresh = evaluate(sc, bundle).to_dict()
    # the stored report also contains u_t1 (needs the truth series)
    assert fresh["scalars"] == stored["scalars"]
    assert fresh["fields"]["f"] == stored["fields"]["f"]


def test_weight_history_starts_at_ones(mini_run):
    out, _ = mini_run
    with open(out / "weights.csv") as fh:
        rows = list(csv.DictReader(fh))
    first = rows[0]
    assert float(first["residual"]) == 1.0
    assert float(first["boundary"]) == 1.0
    assert float(first["data"]) == 1.0


def _read_plot_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in row] for row in body])


def test_export_plotdata_error_fields_recomputable(mini_run):
    out, _ = mini_run
    written = export_plotdata(out)
    assert "err_f.csv" in written and "u_pred_t1.csv" in written
    _, pred = _read_plot_csv(out / "plots" / "f_pred.csv")
    _, true = _read_plot_csv(out / "plots" / "f_true.csv")
    _, err = _read_plot_csv(out / "plots" / "err_f.csv")
    np.testing.assert_allclose(err[:, -1],
                               np.abs(pred[:, -1] - true[:, -1]),
                               atol=1e-12)
    np.testing.assert_array_equal(pred[:, :2], true[:, :2])


def test_export_plotdata_requires_completed_run(tmp_path):
    with pytest.raises(ConfigError, match="missing"):
        export_plotdata(tmp_path)


def _mini_args(extra=()):
    args = []
    for key, val in MINI.items():
        args += ["--set", f"{key}={json.dumps(list(val)) if isinstance(val, tuple) else val}"]
    return args + list(extra)


def test_cli_generate_and_import_obs(tmp_path):
    runner = CliRunner()
    out = tmp_path / "gen"
    res = runner.invoke(main, ["generate", "--scenario", "A1",
                               "--out-dir", str(out)] + _mini_args())
    assert res.exit_code == 0, res.output
    assert (out / "observations.csv").exists()
    res = runner.invoke(main, ["import-obs", "--path",
                               str(out / "observations.csv")])
    assert res.exit_code == 0
    assert "imported" in res.output


def test_cli_unknown_override_exits_2(tmp_path):
    res = CliRunner().invoke(main, ["generate", "--scenario", "A1",
                                    "--out-dir", str(tmp_path),
                                    "--set", "bogus_key=1"])
    assert res.exit_code == 2
    assert "configuration error" in res.output


def test_cli_malformed_observations_exit_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("kind,x,y,t_or_window,clean,noisy,sigma\n"
                   "pointwise,0.5,0.5,not_a_number,0,0,0\n")
    res = CliRunner().invoke(main, ["import-obs", "--path", str(bad)])
    assert res.exit_code == 2


def test_cli_cfl_violation_exits_3(tmp_path):
    res = CliRunner().invoke(main, ["generate", "--scenario", "A1",
                                    "--out-dir", str(tmp_path)]
                             + _mini_args(["--set", "n_steps=2"]))
    assert res.exit_code == 3
    assert "numeric failure" in res.output


def test_cli_train_evaluate_spectra(tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    res = runner.invoke(main, ["train", "--scenario", "A1",
                               "--out-dir", str(out)] + _mini_args())
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["evaluate", "--out-dir", str(out)])
    assert res.exit_code == 0
    json.loads(res.output[res.output.index("{"):])
    res = runner.invoke(main, ["export-plots", "--out-dir", str(out)])
    assert res.exit_code == 0
    res = runner.invoke(main, ["spectra", "--out-dir", str(out), "--forward"])
    assert res.exit_code == 0
    with open(out / "spectra_forward.csv") as fh:
        blocks = {row["block"] for row in csv.DictReader(fh)}
    assert blocks == {"rr", "ux", "uy", "i", "zz"}
