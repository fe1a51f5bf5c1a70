"""Recovered-field and recovered-coefficient error metrics.

Fields are compared on a uniform evaluation grid (101 nodes per axis in 2D,
51 in 3D) at the final time t=1; scalar coefficients are compared directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .networks import NetworkBundle, mlp_eval
from .observations import _interp_stencil
from .pde import (
    CONST2D_D,
    CONST2D_V,
    truth_coefficients_3d,
    truth_diffusion_2d_variable,
    truth_source_2d,
    truth_source_3d,
    truth_velocity_2d_variable,
)
from .scenarios import Scenario
from .solver import FieldSeries

__all__ = ["MetricsReport", "field_metrics", "scalar_metrics",
           "peak_location_error", "evaluate", "eval_axis"]

EVAL_NODES_2D = 101
EVAL_NODES_3D = 51


def eval_axis(dim: int) -> np.ndarray:
    n = EVAL_NODES_2D if dim == 2 else EVAL_NODES_3D
    return np.linspace(0.0, 1.0, n)


def field_metrics(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError("field shapes differ")
    mae = float(np.mean(np.abs(pred - truth)))
    denom = float(np.linalg.norm(truth))
    rel = float(np.linalg.norm(pred - truth)) / denom if denom > 0 else \
        float(np.linalg.norm(pred - truth))
    return {"mae": mae, "rel_l2": rel}


def scalar_metrics(predicted: float, true: float) -> dict[str, float]:
    rel = abs(predicted - true) / abs(true) if true != 0 else abs(predicted)
    return {"predicted": float(predicted), "true": float(true),
            "rel_error": float(rel)}


def peak_location_error(pred: np.ndarray, truth: np.ndarray,
                        coords: np.ndarray) -> float:
    """Distance between the argmax locations of two gridded fields;
    coords holds the node coordinates, one row per flattened node."""
    i_pred = int(np.argmax(np.asarray(pred).ravel()))
    i_true = int(np.argmax(np.asarray(truth).ravel()))
    return float(np.linalg.norm(coords[i_pred] - coords[i_true]))


@dataclass
class MetricsReport:
    scenario_id: str
    fields: dict[str, dict[str, float]] = field(default_factory=dict)
    scalars: dict[str, dict[str, float]] = field(default_factory=dict)
    source_peak_error: float | None = None

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "fields": self.fields,
                "scalars": self.scalars,
                "source_peak_error": self.source_peak_error}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(scenario_id=d["scenario_id"], fields=d["fields"],
                   scalars=d["scalars"],
                   source_peak_error=d["source_peak_error"])


def _truth_u_t1(series: FieldSeries, space: np.ndarray) -> np.ndarray:
    idx, wts = _interp_stencil(series.grid, space)
    return (series.snapshots[-1].ravel()[idx] * wts).sum(axis=1)


def evaluate(sc: Scenario, bundle: NetworkBundle,
             series: FieldSeries | None = None) -> MetricsReport:
    """Compare the trained networks against the closed-form truth (and the
    solver's final-time field if a series is supplied)."""
    report = MetricsReport(scenario_id=sc.id)
    ax = eval_axis(sc.dim)
    mesh = np.meshgrid(*([ax] * sc.dim), indexing="ij")
    space = np.stack([m.ravel() for m in mesh], axis=1)

    # solution field at t=1 (needs the reference series)
    if series is not None:
        pts = np.concatenate([space, np.ones((space.shape[0], 1))], axis=1)
        u_pred = mlp_eval(bundle.u_spec, bundle.net_params("u"), pts)[:, 0]
        u_true = _truth_u_t1(series, space)
        report.fields["u_t1"] = field_metrics(u_pred, u_true)

    # source field (time independent)
    f_pred = mlp_eval(bundle.f_spec, bundle.net_params("f"), space)[:, 0]
    if sc.dim == 2:
        f_true = truth_source_2d(space[:, 0], space[:, 1])
    else:
        f_true = truth_source_3d(space[:, 0], space[:, 1], space[:, 2])
    report.fields["f"] = field_metrics(f_pred, f_true)
    report.source_peak_error = peak_location_error(f_pred, f_true, space)

    gamma = bundle.gamma_values()
    if sc.mode == "2d_constant":
        report.scalars["Vx"] = scalar_metrics(gamma["Vx"], CONST2D_V[0])
        report.scalars["Vy"] = scalar_metrics(gamma["Vy"], CONST2D_V[1])
        report.scalars["D"] = scalar_metrics(gamma["D"], CONST2D_D)
    elif sc.mode == "2d_variable":
        times = np.linspace(0.0, 1.0, EVAL_NODES_2D)
        v_pred = mlp_eval(bundle.v_spec, bundle.net_params("v"),
                          times.reshape(-1, 1))
        v1, v2 = truth_velocity_2d_variable(times)
        report.fields["V1"] = field_metrics(v_pred[:, 0], v1)
        report.fields["V2"] = field_metrics(v_pred[:, 1], v2)
        d_pred = mlp_eval(bundle.d_spec, bundle.net_params("d"), space)[:, 0]
        d_true = truth_diffusion_2d_variable(space[:, 0], space[:, 1])
        report.fields["D"] = field_metrics(d_pred, d_true)
    elif sc.mode == "3d":
        zt_ax = np.linspace(0.0, 1.0, EVAL_NODES_3D)
        zz, tt = np.meshgrid(zt_ax, zt_ax, indexing="ij")
        zt = np.stack([zz.ravel(), tt.ravel()], axis=1)
        v_pred = mlp_eval(bundle.v_spec, bundle.net_params("v"), zt)
        v1, v2, v3, _, _, _ = truth_coefficients_3d(zt[:, 0], zt[:, 1],
                                                    np.zeros(len(zt)))
        report.fields["V1"] = field_metrics(v_pred[:, 0], v1)
        report.fields["V2"] = field_metrics(v_pred[:, 1], v2)
        report.scalars["Vz"] = scalar_metrics(gamma["Vz"], float(v3[0]))
        xz_ax = np.linspace(0.0, 1.0, EVAL_NODES_3D)
        xx, zz2 = np.meshgrid(xz_ax, xz_ax, indexing="ij")
        xz = np.stack([xx.ravel(), zz2.ravel()], axis=1)
        d_pred = mlp_eval(bundle.d_spec, bundle.net_params("d"), xz)
        _, _, _, d1, _, d3 = truth_coefficients_3d(xz[:, 1],
                                                   np.zeros(len(xz)),
                                                   xz[:, 0])
        report.fields["Dh"] = field_metrics(d_pred[:, 0], d1)
        report.fields["Dz"] = field_metrics(d_pred[:, 1], d3)
    return report
