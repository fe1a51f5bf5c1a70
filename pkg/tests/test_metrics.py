"""Error-metric primitives and scenario evaluation reports."""

import numpy as np
import pytest

from adeinv.metrics import (
    MetricsReport,
    evaluate,
    field_metrics,
    peak_location_error,
    scalar_metrics,
)
from adeinv.scenarios import forward_problem, make_bundle, scenario_preset
from adeinv.solver import solve_forward


def test_field_metrics_zero_for_identical_fields():
    x = np.linspace(0, 1, 50)
    m = field_metrics(x, x.copy())
    assert m["mae"] == 0.0
    assert m["rel_l2"] == 0.0


def test_field_metrics_known_values():
    truth = np.array([3.0, 4.0])          # norm 5
    pred = np.array([3.0, 4.0 + 1.0])     # diff norm 1
    m = field_metrics(pred, truth)
    assert m["mae"] == pytest.approx(0.5)
    assert m["rel_l2"] == pytest.approx(1.0 / 5.0)


def test_field_metrics_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        field_metrics(np.zeros(3), np.zeros(4))


def test_scalar_metrics_relative_error():
    m = scalar_metrics(1.1, 1.0)
    assert m["rel_error"] == pytest.approx(0.1)
    assert m["predicted"] == 1.1 and m["true"] == 1.0
    # zero truth falls back to absolute error
    assert scalar_metrics(0.25, 0.0)["rel_error"] == 0.25


def test_peak_location_error():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    a = np.array([0.0, 5.0, 1.0])  # peak at (1,0)
    b = np.array([0.0, 1.0, 5.0])  # peak at (0,1)
    assert peak_location_error(a, a, coords) == 0.0
    assert peak_location_error(a, b, coords) == pytest.approx(np.sqrt(2.0))


def test_report_json_roundtrip():
    rep = MetricsReport(scenario_id="A1",
                        fields={"f": {"mae": 0.1, "rel_l2": 0.2}},
                        scalars={"D": {"predicted": 1.0, "true": 2.0,
                                       "rel_error": 0.5}},
                        source_peak_error=0.07)
    back = MetricsReport.from_json(rep.to_json())
    assert back.to_dict() == rep.to_dict()


def _tiny(sid, **over):
    base = dict(grid_cells=16, n_steps=48, sensor_every=8, sensors=4,
                n_collocation=32, n_boundary=8, n_initial=4,
                widths_u=(3, 8, 1), widths_f=(2, 8, 1))
    if sid == "C":
        base.update(widths_u=(4, 8, 1), widths_f=(3, 8, 1),
                    widths_v=(2, 6, 2), widths_d=(2, 6, 2))
    elif sid == "B":
        base.update(widths_v=(1, 6, 2), widths_d=(2, 6, 1))
    base.update(over)
    return scenario_preset(sid, base)


def test_evaluate_constant_coefficient_report_keys():
    sc = _tiny("A1")
    prob, grid = forward_problem(sc)
    series = solve_forward(prob, grid)
    rep = evaluate(sc, make_bundle(sc), series)
    assert set(rep.scalars) == {"Vx", "Vy", "D"}
    assert set(rep.fields) == {"u_t1", "f"}
    assert rep.source_peak_error is not None
    for entry in rep.scalars.values():
        assert set(entry) == {"predicted", "true", "rel_error"}


def test_evaluate_variable_coefficient_report_keys():
    sc = _tiny("B")
    rep = evaluate(sc, make_bundle(sc))
    assert set(rep.fields) == {"f", "V1", "V2", "D"}
    assert rep.scalars == {}


def test_evaluate_3d_report_keys():
    sc = _tiny("C")
    rep = evaluate(sc, make_bundle(sc))
    assert set(rep.fields) == {"f", "V1", "V2", "Dh", "Dz"}
    assert set(rep.scalars) == {"Vz"}
    # the settling-speed truth is the Stokes value
    assert rep.scalars["Vz"]["true"] == pytest.approx(1.8148e-4, rel=1e-3)
