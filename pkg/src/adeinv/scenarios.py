"""Experiment presets: domain, truth fields, sensors, networks, training.

Four presets are registered:

  A1 - 2D, constant unknown velocity/diffusion, pointwise sensors
  A2 - 2D, constant unknown velocity/diffusion, window-averaged sensors
  B  - 2D, time-dependent velocity net + spatial diffusion net,
       concentration + velocity data
  C  - 3D, wind-profile velocity net + learnable settling scalar +
       anisotropic diffusion net, with a data-only warm-start phase

Defaults are sized for a desktop CPU; ``paper_scale=True`` switches network
widths, iteration counts and grids to the published settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.stats import qmc

from .networks import MLPSpec, NetworkBundle
from .observations import (
    ObservationSet,
    SensorSet,
    add_noise,
    concat_observations,
    sample_accumulative,
    sample_pointwise,
    select_boundary_data,
)
from .pde import (
    CONST2D_D,
    CONST2D_V,
    ProblemDef,
    truth_coefficients_3d,
    truth_diffusion_2d_variable,
    truth_source_2d,
    truth_source_3d,
    truth_velocity_2d_variable,
)
from .solver import FieldSeries, ForwardProblem, Grid, solve_forward
from .training import BoundaryGroup, TrainConfig, TrainingData

__all__ = ["Scenario", "ConfigError", "SCENARIO_IDS", "scenario_preset",
           "forward_problem", "make_bundle", "build_sensors",
           "generate_observations", "build_training_data",
           "latin_hypercube"]

SCENARIO_IDS = ("A1", "A2", "B", "C")


class ConfigError(Exception):
    """Invalid scenario id, override key, or inconsistent configuration."""


@dataclass(frozen=True)
class Scenario:
    id: str
    mode: str
    dim: int
    seed: int = 0
    noise: float = 0.01
    sensors: int = 15
    sensor_kind: str = "pointwise"
    sensor_every: int = 1          # pointwise read-out cadence (solver steps)
    window_steps: int = 30         # accumulative window length (solver steps)
    n_windows: int = 6             # accumulative windows per sensor
    beta: float = 11.0             # boundary data fraction, per mille
    grid_cells: int = 64
    n_steps: int = 256
    n_collocation: int = 4096
    n_boundary: int = 512
    n_initial: int = 128
    widths_u: tuple[int, ...] = (3, 40, 40, 40, 1)
    widths_f: tuple[int, ...] = (2, 40, 40, 40, 1)
    widths_v: tuple[int, ...] | None = None
    widths_d: tuple[int, ...] | None = None
    velocity_data: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def problem(self) -> ProblemDef:
        return ProblemDef(mode=self.mode, dim=self.dim)


def _base_presets() -> dict[str, Scenario]:
    a_train = TrainConfig(adam_steps=5000, lbfgs_steps=5000, adam_lr=2e-3,
                          weight_update_every=100, kernel_subsample=200,
                          lbfgs_memory=50, log_every=200)
    b_train = TrainConfig(adam_steps=4000, lbfgs_steps=2000, adam_lr=2e-3,
                          weight_update_every=100, kernel_subsample=150,
                          lbfgs_memory=50, log_every=200)
    c_train = TrainConfig(pretrain_steps=500, adam_steps=1500,
                          lbfgs_steps=500, adam_lr=2e-3,
                          weight_update_every=100, kernel_subsample=80,
                          lbfgs_memory=50, log_every=100)
    return {
        "A1": Scenario(id="A1", mode="2d_constant", dim=2, sensors=15,
                       sensor_kind="pointwise", noise=0.01, beta=11.0,
                       train=a_train),
        "A2": Scenario(id="A2", mode="2d_constant", dim=2, sensors=15,
                       sensor_kind="accumulative", noise=0.10, beta=11.0,
                       train=a_train),
        "B": Scenario(id="B", mode="2d_variable", dim=2, sensors=30,
                      sensor_kind="pointwise", noise=0.01, beta=1.0,
                      widths_v=(1, 30, 30, 2), widths_d=(2, 30, 30, 1),
                      velocity_data=True, train=b_train),
        "C": Scenario(id="C", mode="3d", dim=3, sensors=30,
                      sensor_kind="pointwise", noise=0.01, beta=1.0,
                      grid_cells=32, n_steps=128, sensor_every=8,
                      n_collocation=1024, n_boundary=192, n_initial=96,
                      widths_u=(4, 30, 30, 30, 1),
                      widths_f=(3, 30, 30, 30, 1),
                      widths_v=(2, 20, 20, 2), widths_d=(2, 20, 20, 2),
                      velocity_data=True, train=c_train),
    }


_PAPER_OVERRIDES = {
    "A1": {"widths_u": (3, 100, 100, 100, 1), "widths_f": (2, 100, 100, 100, 1),
           "n_collocation": 4096,
           "train": TrainConfig(adam_steps=15000, lbfgs_steps=20000,
                                adam_lr=1e-3, lbfgs_lr=0.1,
                                weight_update_every=100,
                                kernel_subsample=200, log_every=500)},
}
_PAPER_OVERRIDES["A2"] = _PAPER_OVERRIDES["A1"]
_PAPER_OVERRIDES["B"] = {
    "widths_u": (3, 100, 100, 100, 1), "widths_f": (2, 100, 100, 100, 1),
    "widths_v": (1, 50, 50, 2), "widths_d": (2, 50, 50, 1),
    "n_collocation": 4096,
    "train": _PAPER_OVERRIDES["A1"]["train"]}
_PAPER_OVERRIDES["C"] = {
    "widths_u": (4, 100, 100, 100, 1), "widths_f": (3, 100, 100, 100, 1),
    "widths_v": (2, 50, 50, 2), "widths_d": (2, 50, 50, 2),
    "grid_cells": 64, "n_steps": 256, "n_collocation": 4096,
    "train": TrainConfig(pretrain_steps=5000, adam_steps=15000,
                         lbfgs_steps=20000, adam_lr=1e-3, lbfgs_lr=0.1,
                         weight_update_every=100, kernel_subsample=200,
                         log_every=500)}

_SCENARIO_FIELDS = {f.name for f in fields(Scenario)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def scenario_preset(scenario_id: str, overrides: dict | None = None,
                    paper_scale: bool = False) -> Scenario:
    """Look up a preset and apply overrides.

    Override keys may be any Scenario field or any TrainConfig field
    (applied to the nested training schedule); unknown keys are rejected.
    """
    presets = _base_presets()
    if scenario_id not in presets:
        raise ConfigError(f"unknown scenario {scenario_id!r}; "
                          f"choose one of {', '.join(SCENARIO_IDS)}")
    sc = presets[scenario_id]
    if paper_scale:
        sc = replace(sc, **_PAPER_OVERRIDES[scenario_id])
    for key, value in (overrides or {}).items():
        if key in _TRAIN_FIELDS:
            sc = replace(sc, train=replace(sc.train, **{key: value}))
        elif key == "id":
            raise ConfigError("the scenario id cannot be overridden")
        elif key in _SCENARIO_FIELDS:
            if key.startswith("widths") and value is not None:
                value = tuple(int(v) for v in value)
            sc = replace(sc, **{key: value})
        else:
            raise ConfigError(f"unknown config key {key!r}")
    _validate(sc)
    return sc


def _validate(sc: Scenario) -> None:
    if sc.noise < 0:
        raise ConfigError("noise level must be nonnegative")
    if sc.sensors < 1:
        raise ConfigError("need at least one sensor")
    if sc.sensor_kind not in ("pointwise", "accumulative"):
        raise ConfigError(f"unknown sensor kind {sc.sensor_kind!r}")
    if sc.beta <= 0:
        raise ConfigError("beta must be positive")
    if sc.train.adam_steps < 0 or sc.train.lbfgs_steps < 0 \
            or sc.train.pretrain_steps < 0:
        raise ConfigError("step counts must be nonnegative")
    if sc.train.adam_lr <= 0 or sc.train.lbfgs_lr <= 0:
        raise ConfigError("learning rates must be positive")
    if sc.train.gamma_lr_scale <= 0:
        raise ConfigError("gamma lr scale must be positive")
    if not (3 <= sc.train.lbfgs_memory <= 50):
        raise ConfigError("lbfgs memory must lie in [3, 50]")


# ---------------------------------------------------------------------------
# truth problem and grid
# ---------------------------------------------------------------------------

def forward_problem(sc: Scenario) -> tuple[ForwardProblem, Grid]:
    grid = Grid(dim=sc.dim, n_cells=sc.grid_cells, n_steps=sc.n_steps)
    if sc.mode in ("2d_constant", "2d_forward"):
        prob = ForwardProblem(
            dim=2,
            velocity=lambda mesh, t: (
                np.full_like(mesh[0], CONST2D_V[0]),
                np.full_like(mesh[0], CONST2D_V[1])),
            diffusion=lambda mesh: (np.full_like(mesh[0], CONST2D_D),
                                    np.full_like(mesh[0], CONST2D_D)),
            source=lambda mesh, t: truth_source_2d(mesh[0], mesh[1]))
    elif sc.mode == "2d_variable":
        def velocity(mesh, t):
            v1, v2 = truth_velocity_2d_variable(t)
            return (np.full_like(mesh[0], v1), np.full_like(mesh[0], v2))

        def diffusion(mesh):
            d = truth_diffusion_2d_variable(mesh[0], mesh[1])
            return (d, d)

        prob = ForwardProblem(
            dim=2, velocity=velocity, diffusion=diffusion,
            source=lambda mesh, t: truth_source_2d(mesh[0], mesh[1]))
    elif sc.mode == "3d":
        def velocity(mesh, t):
            v1, v2, v3, _, _, _ = truth_coefficients_3d(mesh[2], t, mesh[0])
            return (v1, v2, v3)

        def diffusion(mesh):
            _, _, _, d1, d2, d3 = truth_coefficients_3d(mesh[2], 0.0, mesh[0])
            return (d1, d2, d3)

        prob = ForwardProblem(
            dim=3, velocity=velocity, diffusion=diffusion,
            source=lambda mesh, t: truth_source_3d(mesh[0], mesh[1], mesh[2]),
            bc=[["dirichlet", "dirichlet"],
                ["dirichlet", "dirichlet"],
                ["dirichlet", "neumann"]])
    else:
        raise ConfigError(f"no truth problem for mode {sc.mode!r}")
    return prob, grid


def make_bundle(sc: Scenario, seed: int | None = None) -> NetworkBundle:
    seed = sc.seed if seed is None else seed
    u_spec = MLPSpec(widths=tuple(sc.widths_u))
    f_spec = MLPSpec(widths=tuple(sc.widths_f), output_transform="softplus")
    v_spec = None if sc.widths_v is None else MLPSpec(widths=tuple(sc.widths_v))
    d_spec = (None if sc.widths_d is None else
              MLPSpec(widths=tuple(sc.widths_d), output_transform="softplus"))
    return NetworkBundle.create(u_spec, f_spec, v_spec, d_spec,
                                dim=sc.dim, seed=seed)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

def build_sensors(sc: Scenario, grid: Grid, seed: int | None = None
                  ) -> SensorSet:
    seed = sc.seed if seed is None else seed
    rng = np.random.default_rng(seed + 1000)
    locs = rng.uniform(0.05, 0.95, size=(sc.sensors, sc.dim))
    if sc.sensor_kind == "pointwise":
        times = grid.times()[::sc.sensor_every]
        return SensorSet(locations=locs, kind="pointwise",
                         sample_times=times)
    max_start = 1.0 - sc.window_steps * grid.dt
    starts = np.linspace(0.0, max_start, sc.n_windows)
    return SensorSet(locations=locs, kind="accumulative",
                     sample_times=starts, window_steps=sc.window_steps)


def generate_observations(sc: Scenario, series: FieldSeries,
                          seed: int | None = None) -> ObservationSet:
    """Sensor readings plus the boundary-data subsample, both noisy."""
    seed = sc.seed if seed is None else seed
    sensors = build_sensors(sc, series.grid, seed)
    if sc.sensor_kind == "pointwise":
        obs = sample_pointwise(series, sensors)
    else:
        obs = sample_accumulative(series, sensors)
    boundary = select_boundary_data(series, sc.beta, seed + 2000)
    return add_noise(concat_observations([obs, boundary]), sc.noise,
                     seed + 3000)


def _velocity_truth_inputs(sc: Scenario, grid: Grid, seed: int
                           ) -> tuple[np.ndarray, np.ndarray]:
    sensors = build_sensors(sc, grid, seed)
    times = (sensors.sample_times if sc.sensor_kind == "pointwise"
             else grid.times()[::sc.sensor_every])
    if sc.dim == 2:
        inputs = times.reshape(-1, 1)
        v1, v2 = truth_velocity_2d_variable(times)
        values = np.stack([np.broadcast_to(v1, times.shape),
                           np.broadcast_to(v2, times.shape)], axis=1)
    else:
        # measured horizontal wind components at each sensor height
        zs = sensors.locations[:, 2]
        zz, tt = np.meshgrid(zs, times, indexing="ij")
        inputs = np.stack([zz.ravel(), tt.ravel()], axis=1)
        v1, v2, _, _, _, _ = truth_coefficients_3d(inputs[:, 0],
                                                   inputs[:, 1],
                                                   np.zeros(len(inputs)))
        values = np.stack([v1, v2], axis=1)
    return inputs, values


def _noisy_velocity(values: np.ndarray, level: float,
                    seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = values.copy()
    for j in range(values.shape[1]):
        sigma = level * np.sqrt(np.mean(values[:, j] ** 2))
        out[:, j] += sigma * rng.standard_normal(values.shape[0])
    return out


def latin_hypercube(n: int, dim: int, seed: int) -> np.ndarray:
    return qmc.LatinHypercube(d=dim, seed=seed).random(n)


def _boundary_groups_2d(sc: Scenario, n: int, seed: int
                        ) -> list[BoundaryGroup]:
    rng = np.random.default_rng(seed)
    per = n // 4
    groups = []
    faces = [(0, 0.0, (-1.0, 0.0)), (0, 1.0, (1.0, 0.0)),
             (1, 0.0, (0.0, -1.0)), (1, 1.0, (0.0, 1.0))]
    for axis, value, normal in faces:
        pts = rng.uniform(0.0, 1.0, size=(per, 3))  # (x, y, t)
        pts[:, axis] = value
        groups.append(BoundaryGroup(
            pts=pts, bc="neumann",
            normals=np.tile(normal, (per, 1))))
    return groups


def _boundary_groups_3d(sc: Scenario, n: int, seed: int
                        ) -> list[BoundaryGroup]:
    rng = np.random.default_rng(seed)
    per = n // 6
    groups = []
    # four side walls and the ground are absorbing, the top is reflective
    for axis, value in [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0), (2, 0.0)]:
        pts = rng.uniform(0.0, 1.0, size=(per, 4))  # (x, y, z, t)
        pts[:, axis] = value
        groups.append(BoundaryGroup(pts=pts, bc="dirichlet"))
    top = rng.uniform(0.0, 1.0, size=(per, 4))
    top[:, 2] = 1.0
    groups.append(BoundaryGroup(
        pts=top, bc="neumann",
        normals=np.tile((0.0, 0.0, 1.0), (per, 1)),
        scale_by_dz=True))
    return groups


def build_training_data(sc: Scenario, series: FieldSeries,
                        seed: int | None = None) -> TrainingData:
    seed = sc.seed if seed is None else seed
    col = latin_hypercube(sc.n_collocation, sc.dim + 1, seed + 4000)
    if sc.dim == 2:
        boundary = _boundary_groups_2d(sc, sc.n_boundary, seed + 5000)
    else:
        boundary = _boundary_groups_3d(sc, sc.n_boundary, seed + 5000)
    init = latin_hypercube(sc.n_initial, sc.dim, seed + 6000)
    init = np.concatenate([init, np.zeros((sc.n_initial, 1))], axis=1)
    obs = generate_observations(sc, series, seed)
    vel_inputs = vel_values = None
    if sc.velocity_data:
        grid = series.grid
        vel_inputs, clean = _velocity_truth_inputs(sc, grid, seed)
        vel_values = _noisy_velocity(clean, sc.noise, seed + 7000)
    return TrainingData(collocation=col, boundary_groups=boundary,
                        initial_pts=init, obs=obs,
                        velocity_inputs=vel_inputs,
                        velocity_values=vel_values)
