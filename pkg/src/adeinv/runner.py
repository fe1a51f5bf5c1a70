"""End-to-end run orchestration, artifact persistence and plot-data export.

A run directory contains:

    config.json          effective scenario configuration
    observations.csv     noisy sensor + boundary data used for training
    loss_history.csv     step, phase, total and per-term losses
    weights.csv          loss-weight history (step, lambda per term)
    spectra.csv          kernel eigenvalues at the end of training
    metrics.json         recovered-field / coefficient errors
    params_final.bin     trained parameters (+ optimizer sidecar)
    manifest.json        seeds, config hash, version, file digests

`export_plotdata` derives gridded CSVs (predictions, truths, absolute
errors) from a completed run directory.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from .kernel import spectrum
from .metrics import MetricsReport, eval_axis, evaluate
from .networks import NetworkBundle, load_checkpoint, mlp_eval
from .observations import write_observations_csv
from .pde import (
    truth_coefficients_3d,
    truth_diffusion_2d_variable,
    truth_source_2d,
    truth_source_3d,
    truth_velocity_2d_variable,
)
from .scenarios import (
    ConfigError,
    Scenario,
    build_training_data,
    forward_problem,
    make_bundle,
    scenario_preset,
)
from .solver import FieldSeries, solve_forward
from .training import TrainingData, compute_kernel_blocks, run_training

__all__ = ["RunManifest", "run", "generate", "export_plotdata",
           "export_field_series", "spectra_rows", "forward_spectra_rows",
           "write_spectra_csv",
           "load_run_scenario", "load_run_bundle"]

_FLOAT = "%.17g"


@dataclasses.dataclass
class RunManifest:
    scenario_id: str
    config_hash: str
    seeds: dict[str, int]
    version: str
    grid: dict[str, int]
    started_at: str
    finished_at: str
    files: dict[str, str]                 # name -> sha256

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _scenario_dict(sc: Scenario) -> dict:
    d = dataclasses.asdict(sc)
    return d


def _config_hash(sc: Scenario) -> str:
    text = json.dumps(_scenario_dict(sc), sort_keys=True, default=list)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_FLOAT % v if isinstance(v, float) else v
                             for v in row])


def _history_csv(path: Path, history: list[dict]) -> None:
    keys: list[str] = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    rows = [[row.get(k, "") for k in keys] for row in history]
    _write_csv(path, keys, rows)


def spectra_rows(prob, bundle: NetworkBundle, data: TrainingData,
                 cap: int, step: int, seed: int = 0) -> list[tuple]:
    """(block, index, eigenvalue, step) rows sorted by (block, index)."""
    rng = np.random.default_rng(seed)
    blocks = compute_kernel_blocks(prob, bundle, data, cap, rng)
    rows = []
    for name in sorted(blocks.jacobians):
        for i, eig in enumerate(blocks.spectrum(name)):
            rows.append((name, i, float(eig), step))
    return rows


def write_spectra_csv(path: Path, rows: list[tuple]) -> None:
    _write_csv(path, ["block", "index", "eigenvalue", "step"], rows)


def forward_spectra_rows(bundle: NetworkBundle, data: TrainingData,
                         cap: int, step: int,
                         seed: int = 0) -> list[tuple]:
    """Kernel spectra for the solution-only (fixed-coefficient) diagnostic,
    with per-coordinate boundary blocks: rr (residual), ux/uy (boundary
    gradient by face axis), i (initial values), zz (concentration data)."""
    from .kernel import (boundary_jacobian, initial_jacobian,
                         observation_jacobian, residual_jacobian)
    from .pde import ProblemDef

    prob = ProblemDef(mode="2d_forward", dim=2)
    rng = np.random.default_rng(seed)
    n = data.collocation.shape[0]
    idx = rng.choice(n, size=min(cap, n), replace=False) if n > cap \
        else np.arange(n)
    jacs: dict[str, np.ndarray] = {
        "rr": residual_jacobian(prob, bundle, data.collocation[idx])}
    by_axis: dict[str, list[np.ndarray]] = {"ux": [], "uy": []}
    for grp in data.boundary_groups:
        jac = boundary_jacobian(prob, bundle, grp.pts, grp.bc, grp.normals)
        if grp.normals is not None and np.any(grp.normals[:, 0]):
            by_axis["ux"].append(jac)
        else:
            by_axis["uy"].append(jac)
    for label, parts in by_axis.items():
        if parts:
            jacs[label] = np.concatenate(parts, axis=0)
    if data.initial_pts is not None:
        jacs["i"] = initial_jacobian(prob, bundle, data.initial_pts)
    if data.obs is not None and len(data.obs):
        jacs["zz"] = observation_jacobian(prob, bundle, data.obs)
    rows = []
    for name in sorted(jacs):
        for i, eig in enumerate(spectrum(jacs[name] @ jacs[name].T)):
            rows.append((name, i, float(eig), step))
    return rows


def export_field_series(series: FieldSeries, out_dir, scenario_hash: str,
                        seed: int) -> list[str]:
    """One CSV per stored snapshot plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = series.grid
    mesh = grid.node_mesh()
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    names = ["x", "y", "z"][:grid.dim]
    written = []
    for k in range(grid.n_steps + 1):
        name = f"u_step{k:05d}.csv"
        vals = series.snapshots[k].ravel()
        _write_csv(out / name, names + ["u"],
                   [tuple(coords[i]) + (float(vals[i]),)
                    for i in range(coords.shape[0])])
        written.append(name)
    manifest = {"dim": grid.dim, "n_cells": grid.n_cells,
                "n_steps": grid.n_steps, "dt": grid.dt,
                "scenario_hash": scenario_hash, "seed": seed,
                "snapshots": written}
    (out / "fields.json").write_text(json.dumps(manifest, indent=2))
    return written + ["fields.json"]


def generate(scenario_id: str, overrides: dict | None, out_dir,
             paper_scale: bool = False,
             export_fields: bool = False) -> Path:
    """Solve the truth problem and write the observation set (and,
    optionally, every truth snapshot)."""
    sc = scenario_preset(scenario_id, overrides, paper_scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(_scenario_dict(sc), indent=2, sort_keys=True,
                   default=list))
    prob, grid = forward_problem(sc)
    series = solve_forward(prob, grid)
    from .scenarios import generate_observations
    obs = generate_observations(sc, series)
    write_observations_csv(obs, out / "observations.csv")
    if export_fields:
        export_field_series(series, out / "truth", _config_hash(sc), sc.seed)
    return out


def run(scenario_id: str, overrides: dict | None, out_dir,
        paper_scale: bool = False) -> RunManifest:
    """generate -> train -> evaluate -> persist everything + manifest."""
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    sc = scenario_preset(scenario_id, overrides, paper_scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(_scenario_dict(sc), indent=2, sort_keys=True,
                   default=list))

    prob_fd, grid = forward_problem(sc)
    series = solve_forward(prob_fd, grid)
    data = build_training_data(sc, series)
    write_observations_csv(data.obs, out / "observations.csv")

    bundle = make_bundle(sc)
    prob = sc.problem()
    result = run_training(prob, bundle, data, sc.train,
                          checkpoint_dir=str(out))

    _history_csv(out / "loss_history.csv", result.loss_history)
    _history_csv(out / "weights.csv", result.weight_history)
    final_step = (sc.train.pretrain_steps + sc.train.adam_steps
                  + sc.train.lbfgs_steps)
    write_spectra_csv(
        out / "spectra.csv",
        spectra_rows(prob, result.bundle, data,
                     min(sc.train.kernel_subsample, 100), final_step,
                     seed=sc.train.kernel_seed))
    report = evaluate(sc, result.bundle, series)
    (out / "metrics.json").write_text(report.to_json())

    finished = time.strftime("%Y-%m-%dT%H:%M:%S")
    files = {p.name: _sha256(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    manifest = RunManifest(
        scenario_id=sc.id, config_hash=_config_hash(sc),
        seeds={"scenario": sc.seed, "kernel": sc.train.kernel_seed},
        version=__version__,
        grid={"dim": sc.dim, "n_cells": sc.grid_cells,
              "n_steps": sc.n_steps},
        started_at=started, finished_at=finished, files=files)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_run_scenario(run_dir) -> Scenario:
    cfg = json.loads((Path(run_dir) / "config.json").read_text())
    sid = cfg.pop("id")
    train = cfg.pop("train")
    overrides = dict(cfg)
    overrides.update(train)
    return scenario_preset(sid, overrides)


def load_run_bundle(run_dir, sc: Scenario) -> NetworkBundle:
    path = Path(run_dir) / "params_final.bin"
    if not path.exists():
        raise ConfigError(f"missing trained parameters: {path}")
    _, params, _ = load_checkpoint(path)
    bundle = make_bundle(sc)
    if params.layout != bundle.params.layout:
        raise ConfigError("checkpoint layout does not match the scenario")
    return bundle.with_params(params.data)


def _grid_csv(path: Path, coords: np.ndarray, names: list[str],
              values: np.ndarray, value_name: str) -> None:
    _write_csv(path, names + [value_name],
               [tuple(coords[i]) + (float(values[i]),)
                for i in range(coords.shape[0])])


def export_plotdata(run_dir) -> list[str]:
    """Write gridded prediction/truth/error CSVs next to the run artifacts."""
    run_dir = Path(run_dir)
    missing = [n for n in ("config.json", "params_final.bin")
               if not (run_dir / n).exists()]
    if missing:
        raise ConfigError(
            f"run directory incomplete, missing: {', '.join(missing)}")
    sc = load_run_scenario(run_dir)
    bundle = load_run_bundle(run_dir, sc)
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)

    ax = eval_axis(sc.dim)
    mesh = np.meshgrid(*([ax] * sc.dim), indexing="ij")
    space = np.stack([m.ravel() for m in mesh], axis=1)
    names = ["x", "y", "z"][:sc.dim]
    written = []

    def emit(name, values, value_name="value"):
        _grid_csv(out / name, space, names, values, value_name)
        written.append(name)

    # solution at t=1 against a fresh truth solve
    pts = np.concatenate([space, np.ones((space.shape[0], 1))], axis=1)
    u_pred = mlp_eval(bundle.u_spec, bundle.net_params("u"), pts)[:, 0]
    prob_fd, grid = forward_problem(sc)
    series = solve_forward(prob_fd, grid)
    from .metrics import _truth_u_t1
    u_true = _truth_u_t1(series, space)
    emit("u_pred_t1.csv", u_pred, "u")
    emit("u_true_t1.csv", u_true, "u")
    emit("err_u_t1.csv", np.abs(u_pred - u_true), "abs_error")

    f_pred = mlp_eval(bundle.f_spec, bundle.net_params("f"), space)[:, 0]
    if sc.dim == 2:
        f_true = truth_source_2d(space[:, 0], space[:, 1])
    else:
        f_true = truth_source_3d(space[:, 0], space[:, 1], space[:, 2])
    emit("f_pred.csv", f_pred, "f")
    emit("f_true.csv", f_true, "f")
    emit("err_f.csv", np.abs(f_pred - f_true), "abs_error")

    if sc.mode == "2d_variable":
        times = np.linspace(0.0, 1.0, len(ax))
        v_pred = mlp_eval(bundle.v_spec, bundle.net_params("v"),
                          times.reshape(-1, 1))
        v1, v2 = truth_velocity_2d_variable(times)
        _write_csv(out / "v_pred.csv", ["t", "V1", "V2"],
                   [(float(t), float(a), float(b))
                    for t, (a, b) in zip(times, v_pred)])
        _write_csv(out / "v_true.csv", ["t", "V1", "V2"],
                   [(float(t), float(a), float(b))
                    for t, a, b in zip(times, v1, v2)])
        d_pred = mlp_eval(bundle.d_spec, bundle.net_params("d"), space)[:, 0]
        d_true = truth_diffusion_2d_variable(space[:, 0], space[:, 1])
        emit("d_pred.csv", d_pred, "D")
        emit("d_true.csv", d_true, "D")
        emit("err_d.csv", np.abs(d_pred - d_true), "abs_error")
        written += ["v_pred.csv", "v_true.csv"]
    elif sc.mode == "3d":
        zt = np.stack([space[:, 2], np.full(space.shape[0], 1.0)], axis=1)
        v_pred = mlp_eval(bundle.v_spec, bundle.net_params("v"), zt)
        v1, v2, _, _, _, _ = truth_coefficients_3d(
            zt[:, 0], zt[:, 1], np.zeros(len(zt)))
        emit("v1_pred_t1.csv", v_pred[:, 0], "V1")
        emit("v1_true_t1.csv", v1, "V1")
        xz = space[:, [0, 2]]
        d_pred = mlp_eval(bundle.d_spec, bundle.net_params("d"), xz)
        _, _, _, d1, _, d3 = truth_coefficients_3d(
            xz[:, 1], np.zeros(len(xz)), xz[:, 0])
        emit("dh_pred.csv", d_pred[:, 0], "Dh")
        emit("dh_true.csv", d1, "Dh")
        emit("dz_pred.csv", d_pred[:, 1], "Dz")
        emit("dz_true.csv", d3, "Dz")
    return written
