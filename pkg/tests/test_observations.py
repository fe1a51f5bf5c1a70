import numpy as np
import pytest

from adeinv.observations import (
    ObservationError,
    SensorSet,
    add_noise,
    concat_observations,
    read_observations_csv,
    sample_accumulative,
    sample_pointwise,
    select_boundary_data,
    write_observations_csv,
)
from adeinv.solver import FieldSeries, Grid


def _series_from_function(grid, fn):
    mesh = grid.node_mesh()
    snaps = np.stack([fn(mesh, t) for t in grid.times()])
    return FieldSeries(grid=grid, snapshots=snaps)


def _linear_field(mesh, t):
    return 1.0 + 2.0 * mesh[0] - 3.0 * mesh[1] + 0.5 * t


def test_pointwise_sampling_linear_field_exact():
    grid = Grid(dim=2, n_cells=16, n_steps=32)
    series = _series_from_function(grid, _linear_field)
    locs = np.array([[0.13, 0.87], [0.5, 0.5], [0.99, 0.01]])
    sensors = SensorSet(locations=locs, kind="pointwise",
                        sample_times=np.array([0.25, 1.0]))
    obs = sample_pointwise(series, sensors)
    assert len(obs) == 6
    for i in range(len(obs)):
        expect = _linear_field([obs.locs[i, 0], obs.locs[i, 1]],
                               obs.t_start[i])
        assert obs.clean[i] == pytest.approx(expect, abs=1e-13)
    # snapping picks the nearest stored step
    np.testing.assert_allclose(np.unique(obs.t_start), [0.25, 1.0])


def test_pointwise_time_snaps_to_nearest_step():
    grid = Grid(dim=2, n_cells=8, n_steps=10)  # dt = 0.1
    series = _series_from_function(grid, _linear_field)
    sensors = SensorSet(locations=np.array([[0.5, 0.5]]),
                        sample_times=np.array([0.52]))
    obs = sample_pointwise(series, sensors)
    assert obs.t_start[0] == pytest.approx(0.5)


def test_pointwise_out_of_range_time_rejected():
    grid = Grid(dim=2, n_cells=8, n_steps=10)
    series = _series_from_function(grid, _linear_field)
    sensors = SensorSet(locations=np.array([[0.5, 0.5]]),
                        sample_times=np.array([1.2]))
    with pytest.raises(ObservationError):
        sample_pointwise(series, sensors)


def test_sensor_locations_validated():
    with pytest.raises(ObservationError):
        SensorSet(locations=np.array([[1.5, 0.5]]))


def test_accumulative_window_mean_matches_analytic():
    grid = Grid(dim=2, n_cells=8, n_steps=200)

    def fn(mesh, t):
        return np.full_like(mesh[0], t * t)

    series = _series_from_function(grid, fn)
    sensors = SensorSet(locations=np.array([[0.3, 0.7]]),
                        kind="accumulative",
                        sample_times=np.array([0.2]),
                        window_steps=30)
    obs = sample_accumulative(series, sensors)
    t0, t1 = obs.t_start[0], obs.t_end[0]
    assert t0 == pytest.approx(0.2) and t1 == pytest.approx(0.35)
    analytic = (t1 ** 3 - t0 ** 3) / (3.0 * (t1 - t0))
    # trapezoid rule on a quadratic: O(dt^2) error
    assert obs.clean[0] == pytest.approx(analytic, abs=1e-5)
    assert obs.kinds[0] == "accumulative"


def test_accumulative_window_past_end_rejected():
    grid = Grid(dim=2, n_cells=8, n_steps=40)
    series = _series_from_function(grid, _linear_field)
    sensors = SensorSet(locations=np.array([[0.3, 0.7]]),
                        kind="accumulative",
                        sample_times=np.array([0.9]),
                        window_steps=30)
    with pytest.raises(ObservationError):
        sample_accumulative(series, sensors)


def test_quadrature_pointwise_and_window():
    grid = Grid(dim=2, n_cells=8, n_steps=200)
    series = _series_from_function(grid, _linear_field)
    sensors = SensorSet(locations=np.array([[0.3, 0.7]]),
                        kind="accumulative",
                        sample_times=np.array([0.2]),
                        window_steps=30)
    obs = sample_accumulative(series, sensors)
    pts, wts, owner = obs.quadrature()
    assert pts.shape == (31, 3)
    assert np.all(owner == 0)
    assert wts.sum() == pytest.approx(1.0, abs=1e-14)
    # quadrature applied to the sampled field reproduces the stored mean
    vals = _linear_field([pts[:, 0], pts[:, 1]], pts[:, 2])
    assert float(wts @ vals) == pytest.approx(obs.clean[0], abs=1e-12)

    point_sensors = SensorSet(locations=np.array([[0.1, 0.2], [0.4, 0.8]]),
                              sample_times=np.array([0.5]))
    pobs = sample_pointwise(series, point_sensors)
    ppts, pwts, powner = pobs.quadrature()
    assert ppts.shape == (2, 3)
    np.testing.assert_array_equal(pwts, 1.0)
    np.testing.assert_array_equal(powner, [0, 1])


def test_noise_is_seeded_and_scaled_per_sensor():
    grid = Grid(dim=2, n_cells=8, n_steps=10)

    def fn(mesh, t):
        return 5.0 * mesh[0] + t

    series = _series_from_function(grid, fn)
    sensors = SensorSet(locations=np.array([[0.2, 0.5], [0.9, 0.5]]),
                        sample_times=grid.times())
    obs = sample_pointwise(series, sensors)
    noisy1 = add_noise(obs, 0.1, seed=3)
    noisy2 = add_noise(obs, 0.1, seed=3)
    noisy3 = add_noise(obs, 0.1, seed=4)
    np.testing.assert_array_equal(noisy1.noisy, noisy2.noisy)
    assert np.any(noisy1.noisy != noisy3.noisy)
    for sid in (0, 1):
        sel = obs.sensor_ids == sid
        rms = np.sqrt(np.mean(obs.clean[sel] ** 2))
        np.testing.assert_allclose(noisy1.sigma[sel], 0.1 * rms)
    # sensor 1 sits at larger u, so it gets the larger deviation
    assert noisy1.sigma[obs.sensor_ids == 1][0] > \
        noisy1.sigma[obs.sensor_ids == 0][0]
    clean_copy = add_noise(obs, 0.0, seed=3)
    np.testing.assert_array_equal(clean_copy.noisy, clean_copy.clean)


def test_boundary_subsample_count_and_membership():
    grid = Grid(dim=2, n_cells=16, n_steps=20)
    series = _series_from_function(grid, _linear_field)
    per_mille = 11.0
    obs = select_boundary_data(series, per_mille, seed=0)
    n_boundary_nodes = 4 * 16  # perimeter of a 17x17 node grid
    total = n_boundary_nodes * 21
    assert len(obs) == int(np.ceil(per_mille / 1000.0 * total))
    on_edge = (np.isclose(obs.locs, 0.0) | np.isclose(obs.locs, 1.0)).any(axis=1)
    assert np.all(on_edge)
    for i in range(len(obs)):
        expect = _linear_field([obs.locs[i, 0], obs.locs[i, 1]],
                               obs.t_start[i])
        assert obs.clean[i] == pytest.approx(expect, abs=1e-13)
    again = select_boundary_data(series, per_mille, seed=0)
    np.testing.assert_array_equal(obs.clean, again.clean)


def test_csv_roundtrip_exact(tmp_path):
    grid = Grid(dim=2, n_cells=8, n_steps=200)
    series = _series_from_function(grid, _linear_field)
    point = sample_pointwise(
        series, SensorSet(locations=np.array([[0.31, 0.77]]),
                          sample_times=np.array([0.5, 1.0])))
    window = sample_accumulative(
        series, SensorSet(locations=np.array([[0.5, 0.25]]),
                          kind="accumulative",
                          sample_times=np.array([0.1]), window_steps=30))
    obs = add_noise(concat_observations([point, window]), 0.05, seed=9)
    path = tmp_path / "obs.csv"
    write_observations_csv(obs, path)
    back = read_observations_csv(path, dim=2)
    assert back.kinds == obs.kinds
    np.testing.assert_array_equal(back.locs, obs.locs)
    np.testing.assert_array_equal(back.t_start, obs.t_start)
    np.testing.assert_array_equal(back.t_end, obs.t_end)
    np.testing.assert_array_equal(back.clean, obs.clean)
    np.testing.assert_array_equal(back.noisy, obs.noisy)
    np.testing.assert_array_equal(back.sigma, obs.sigma)


def test_csv_errors_carry_line_numbers(tmp_path):
    good = "kind,x,y,t_or_window,clean,noisy,sigma\n"
    cases = [
        (good + "pointwise,0.5,0.5,0.5,1.0,1.0\n", "2"),           # short row
        (good + "pointwise,0.5,1.5,0.5,1.0,1.0,0.1\n", "domain"),  # bad loc
        (good + "pointwise,0.5,0.5,oops,1.0,1.0,0.1\n", "3"),      # bad float
        (good + "window,0.5,0.5,0.1..0.2,1.0,1.0,0.1\n", "kind"),  # bad kind
        (good + "accumulative,0.5,0.5,0.3..0.2,1.0,1.0,0.1\n", "t1"),
        (good + "pointwise,0.5,0.5,0.5,1.0,1.0,-0.1\n", "sigma"),
        ("bad,header\n", "header"),
        (good, "no observation rows"),
    ]
    for i, (text, _) in enumerate(cases):
        path = tmp_path / f"bad{i}.csv"
        path.write_text(text)
        with pytest.raises(ObservationError):
            read_observations_csv(path, dim=2)
    # line number appears in the message
    path = tmp_path / "lineno.csv"
    path.write_text(good + "pointwise,0.5,0.5,0.5,1.0,1.0,0.1\n"
                    + "pointwise,0.5,0.5,nope,1.0,1.0,0.1\n")
    with pytest.raises(ObservationError, match=":3:"):
        read_observations_csv(path, dim=2)


def test_three_dimensional_sampling():
    grid = Grid(dim=3, n_cells=8, n_steps=16)

    def fn(mesh, t):
        return mesh[0] + 2 * mesh[1] + 3 * mesh[2] + t

    series = _series_from_function(grid, fn)
    sensors = SensorSet(locations=np.array([[0.21, 0.43, 0.65]]),
                        sample_times=np.array([0.5]))
    obs = sample_pointwise(series, sensors)
    assert obs.clean[0] == pytest.approx(0.21 + 0.86 + 1.95 + 0.5, abs=1e-13)
