"""Command-line interface.

Verbs: generate (truth + observations), train (full run), evaluate
(metrics from a finished run), export-plots, spectra, import-obs.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .autodiff import NumericError
from .observations import ObservationError, read_observations_csv
from .scenarios import SCENARIO_IDS, ConfigError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ObservationError, ValueError) as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
    return wrapper


def _common(fn):
    fn = click.option("--scenario", "scenario_id", required=True,
                      type=click.Choice(SCENARIO_IDS),
                      help="Scenario preset.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Master seed override.")(fn)
    fn = click.option("--noise", type=float, default=None,
                      help="Noise level override (fraction, e.g. 0.01).")(fn)
    fn = click.option("--sensors", type=int, default=None,
                      help="Sensor count override.")(fn)
    fn = click.option("--out-dir", required=True,
                      type=click.Path(file_okay=False),
                      help="Run/output directory.")(fn)
    fn = click.option("--paper-scale", is_flag=True, default=False,
                      help="Use the published full-scale settings.")(fn)
    fn = click.option("--set", "extra", multiple=True,
                      metavar="KEY=VALUE",
                      help="Additional config override (repeatable).")(fn)
    return fn


def _collect_overrides(seed, noise, sensors, extra) -> dict:
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if noise is not None:
        overrides["noise"] = noise
    if sensors is not None:
        overrides["sensors"] = sensors
    for item in extra:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key] = value
    return overrides


@click.group()
def main():
    """Source inversion for advection-diffusion problems."""


@main.command()
@_common
@click.option("--export-fields", is_flag=True, default=False,
              help="Also write every truth snapshot as CSV.")
@_exit_codes
def generate(scenario_id, seed, noise, sensors, out_dir, paper_scale,
             extra, export_fields):
    """Solve the truth problem and write the noisy observation set."""
    from .runner import generate as run_generate

    overrides = _collect_overrides(seed, noise, sensors, extra)
    out = run_generate(scenario_id, overrides, out_dir, paper_scale,
                       export_fields=export_fields)
    click.echo(f"observations written to {out}")


@main.command()
@_common
@_exit_codes
def train(scenario_id, seed, noise, sensors, out_dir, paper_scale, extra):
    """Run the full pipeline: generate, train, evaluate, persist."""
    from .runner import run

    overrides = _collect_overrides(seed, noise, sensors, extra)
    effective = json.dumps(overrides, sort_keys=True)
    click.echo(f"scenario {scenario_id} overrides {effective}")
    manifest = run(scenario_id, overrides, out_dir, paper_scale)
    click.echo(f"run complete: {len(manifest.files)} artifacts in {out_dir}")


@main.command()
@click.option("--out-dir", "run_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Completed run directory.")
@_exit_codes
def evaluate(run_dir):
    """Recompute metrics from a finished run directory."""
    from .metrics import evaluate as eval_metrics
    from .runner import load_run_bundle, load_run_scenario

    sc = load_run_scenario(run_dir)
    bundle = load_run_bundle(run_dir, sc)
    report = eval_metrics(sc, bundle)
    path = Path(run_dir) / "metrics.json"
    path.write_text(report.to_json())
    click.echo(report.to_json())


@main.command("export-plots")
@click.option("--out-dir", "run_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Completed run directory.")
@_exit_codes
def export_plots(run_dir):
    """Write gridded prediction/truth/error CSVs for plotting."""
    from .runner import export_plotdata

    written = export_plotdata(run_dir)
    click.echo("wrote " + ", ".join(written))


@main.command()
@click.option("--out-dir", "run_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Completed run directory.")
@click.option("--forward", is_flag=True, default=False,
              help="Per-coordinate kernel blocks of the solution-only "
                   "diagnostic (2D only).")
@_exit_codes
def spectra(run_dir, forward):
    """Export kernel eigenvalue spectra for a trained run."""
    from .runner import (forward_spectra_rows, load_run_bundle,
                         load_run_scenario, spectra_rows, write_spectra_csv)
    from .scenarios import build_training_data, forward_problem
    from .solver import solve_forward

    sc = load_run_scenario(run_dir)
    bundle = load_run_bundle(run_dir, sc)
    prob_fd, grid = forward_problem(sc)
    series = solve_forward(prob_fd, grid)
    data = build_training_data(sc, series)
    cap = min(sc.train.kernel_subsample, 100)
    step = (sc.train.pretrain_steps + sc.train.adam_steps
            + sc.train.lbfgs_steps)
    if forward:
        if sc.dim != 2:
            raise ConfigError("the forward diagnostic is 2D only")
        rows = forward_spectra_rows(bundle, data, cap, step,
                                    seed=sc.train.kernel_seed)
        name = "spectra_forward.csv"
    else:
        rows = spectra_rows(sc.problem(), bundle, data, cap, step,
                            seed=sc.train.kernel_seed)
        name = "spectra.csv"
    path = Path(run_dir) / name
    write_spectra_csv(path, rows)
    click.echo(f"wrote {path}")


@main.command("import-obs")
@click.option("--path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Observation CSV to validate and import.")
@click.option("--dim", type=click.Choice(["2", "3"]), default="2",
              help="Spatial dimension of the observation coordinates.")
@_exit_codes
def import_obs(path, dim):
    """Validate an externally supplied observation CSV."""
    obs = read_observations_csv(path, dim=int(dim))
    kinds = sorted(set(obs.kinds))
    click.echo(f"imported {len(obs)} observations "
               f"({', '.join(kinds)}) from {path}")


if __name__ == "__main__":
    main()
