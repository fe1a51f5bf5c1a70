"""Acceptance gate: end-to-end behavioural guarantees of the package.

Each test pins one externally visible contract — derivative correctness,
kernel structure, adaptive-weight identities, solver convergence order,
optimizer behaviour, desk-scale inversion quality on the four bundled
scenarios, and the kernel-trace diagnostic — at the stated tolerances.
The scenario tests train real (desk-scale) models and dominate the suite's
runtime; everything else completes in seconds.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from adeinv.autodiff import ParamVector, Tape, reverse_grad
from adeinv.kernel import (
    KernelBlocks,
    adaptive_weights,
    boundary_jacobian,
    initial_jacobian,
    observation_jacobian,
    residual_jacobian,
    spectrum,
    trace_fast,
)
from adeinv.networks import MLPSpec, NetworkBundle, init_mlp, jet_forward, mlp_eval
from adeinv.pde import ProblemDef, bind_params
from adeinv.runner import run
from adeinv.scenarios import (
    build_training_data,
    forward_problem,
    make_bundle,
    scenario_preset,
)
from adeinv.solver import ForwardProblem, Grid, solve_forward
from adeinv.training import (
    AdamState,
    TrainConfig,
    adam_step,
    lbfgs_minimize,
    load_resume_state,
    run_training,
)

RUNS = Path("/tmp/adeinv_acceptance_runs")


# ---------------------------------------------------------------------------
# 1. derivative correctness across randomized networks
# ---------------------------------------------------------------------------

def _central_diff(f, x0, h):
    out = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy(); xp[i] += h
        xm = x0.copy(); xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def test_gradients_and_jets_match_finite_differences_100_trials():
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    for trial in range(100):
        n_in = int(rng.integers(1, 4))
        width = int(rng.integers(4, 10))
        spec = MLPSpec(widths=(n_in, width, 1))
        params = init_mlp(spec, seed=trial)
        x = rng.uniform(-1, 1, size=(3, n_in))

        # reverse-mode gradient of a scalar loss w.r.t. all parameters
        def loss(theta):
            p = ParamVector(data=theta, layout=params.layout)
            tape = Tape()
            leaves = [tape.leaf(arr) for _, arr in p.unpack()]
            a = tape.const(x)
            n_layers = len(spec.widths) - 1
            for i in range(n_layers):
                z = tape.add(tape.matmul(a, leaves[2 * i]),
                             leaves[2 * i + 1])
                a = tape.tanh(z) if i < n_layers - 1 else z
            return tape, tape.mean(tape.square(a)), leaves

        tape, val, leaves = loss(params.data)
        grad = np.concatenate([g.ravel()
                               for g in reverse_grad(val, leaves)])
        fd = _central_diff(lambda th: float(loss(th)[1].value),
                           params.data.copy(), 1e-6)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grad - fd) / denom) < 1e-6, trial

        # jet (input gradient + diagonal Hessian) at a random point
        pt = x[0]
        jet = jet_forward(spec, params, pt)
        for k in range(n_in):
            ek = np.zeros(n_in); ek[k] = 1.0
            g_fd = float((mlp_eval(spec, params, pt + 1e-5 * ek)
                          - mlp_eval(spec, params, pt - 1e-5 * ek)).ravel()[0]
                         ) / 2e-5
            assert abs(jet.grad[k, 0] - g_fd) \
                / max(abs(g_fd), 1e-5) < 1e-5, trial
            h = 1e-3
            h_fd = float((mlp_eval(spec, params, pt + h * ek)
                          - 2 * mlp_eval(spec, params, pt)
                          + mlp_eval(spec, params, pt - h * ek)).ravel()[0]
                         ) / h ** 2
            assert abs(jet.diag_hess[k, 0] - h_fd) \
                / max(abs(h_fd), 1e-2) < 1e-5, trial
    assert time.monotonic() - t0 < 10.0


# ---------------------------------------------------------------------------
# 2. kernel structural fidelity on a toy bundle
# ---------------------------------------------------------------------------

def _toy_bundle():
    # u: (3,3,1) -> 16 params, f: (2,2,1) -> 9, gammas: 3  (under 50 total)
    u = MLPSpec(widths=(3, 3, 1))
    f = MLPSpec(widths=(2, 2, 1), output_transform="softplus")
    return NetworkBundle.create(u, f, None, None, dim=2, seed=3)


def _brute_force_residual_rows(prob, bundle, pts):
    from adeinv.pde import residual_batch
    rows = []
    for p in pts:
        tape = Tape()
        groups = bind_params(tape, bundle)
        r = residual_batch(tape, prob, bundle, groups, p[None, :])
        scalar = tape.sum(r)
        grads = reverse_grad(scalar, [v for _, v in groups["ordered"]])
        rows.append(np.concatenate([g.ravel() for g in grads]))
    return np.asarray(rows)


def test_kernel_blocks_match_brute_force_and_are_psd():
    prob = ProblemDef(mode="2d_constant", dim=2)
    bundle = _toy_bundle()
    assert bundle.params.data.size <= 50
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(8, 3))
    jac = residual_jacobian(prob, bundle, pts)
    brute = _brute_force_residual_rows(prob, bundle, pts)
    np.testing.assert_allclose(jac, brute, atol=1e-12)

    b_pts = rng.uniform(0, 1, size=(8, 3)); b_pts[:, 0] = 0.0
    normals = np.tile((-1.0, 0.0), (8, 1))
    i_pts = rng.uniform(0, 1, size=(8, 3)); i_pts[:, 2] = 0.0
    blocks = KernelBlocks(jacobians={
        "residual": jac,
        "boundary": boundary_jacobian(prob, bundle, b_pts, "neumann",
                                      normals),
        "data": initial_jacobian(prob, bundle, i_pts),
    })
    for term in blocks.jacobians:
        K = blocks.matrix(term)
        np.testing.assert_allclose(K, K.T, atol=1e-15)
        eig = blocks.spectrum(term)
        tr = blocks.trace(term)
        assert eig.min() >= -1e-8 * max(tr / K.shape[0], 1e-30)
        assert abs(eig.sum() - tr) <= 1e-10 * max(tr, 1.0)


# ---------------------------------------------------------------------------
# 3. adaptive weight identity
# ---------------------------------------------------------------------------

def test_adaptive_weight_identity_and_equal_trace_case():
    rng = np.random.default_rng(5)
    for _ in range(10):
        jacs = {name: rng.normal(size=(6, 11)) for name in
                ("residual", "boundary", "data")}
        blocks = KernelBlocks(jacobians=jacs)
        lam = adaptive_weights(blocks)
        total = sum(blocks.traces().values())
        for term, w in lam.items():
            assert w * blocks.trace(term) == pytest.approx(total, rel=1e-12)
    # equal traces -> every weight is the number of blocks
    eye = np.eye(4)
    blocks = KernelBlocks(jacobians={"residual": eye, "boundary": eye.copy(),
                                     "data": eye.copy()})
    lam = adaptive_weights(blocks)
    assert lam == {"residual": 3.0, "boundary": 3.0, "data": 3.0}


# ---------------------------------------------------------------------------
# 4. forward solver convergence order
# ---------------------------------------------------------------------------

def test_solver_convergence_order_and_exact_zero():
    t0 = time.monotonic()
    d_const = 0.05

    def manufactured(n):
        grid = Grid(dim=2, n_cells=n, n_steps=max(n * n // 16, 8))

        def source(mesh, t):
            x, y = mesh
            u = np.cos(np.pi * x) * np.cos(np.pi * y) * np.exp(-t)
            return (-1.0 + 2 * d_const * np.pi ** 2) * u

        prob = ForwardProblem(
            dim=2,
            velocity=lambda mesh, t: (np.zeros_like(mesh[0]),) * 2,
            diffusion=lambda mesh: (np.full_like(mesh[0], d_const),) * 2,
            source=source,
            u0=lambda mesh: np.cos(np.pi * mesh[0]) * np.cos(np.pi * mesh[1]))
        series = solve_forward(prob, grid)
        x, y = grid.node_mesh()
        exact = np.cos(np.pi * x) * np.cos(np.pi * y) * np.exp(-1.0)
        err = series.snapshots[-1] - exact
        return np.sqrt(np.mean(err ** 2))

    errs = [manufactured(n) for n in (32, 64, 128)]
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 1.8, (errs, orders)

    # zero source, zero initial condition -> identically zero
    grid = Grid(dim=2, n_cells=16, n_steps=16)
    prob = ForwardProblem(
        dim=2,
        velocity=lambda mesh, t: (np.full_like(mesh[0], 0.3),
                                  np.full_like(mesh[0], -0.1)),
        diffusion=lambda mesh: (np.full_like(mesh[0], 0.02),) * 2,
        source=lambda mesh, t: np.zeros_like(mesh[0]))
    series = solve_forward(prob, grid)
    assert np.all(series.snapshots[-1] == 0.0)
    assert time.monotonic() - t0 < 120.0


# ---------------------------------------------------------------------------
# 5. optimizer contracts
# ---------------------------------------------------------------------------

def test_lbfgs_quadratic_contract():
    rng = np.random.default_rng(12)
    target = rng.normal(size=50)

    def fun(theta):
        d = theta - target
        return float(d @ d), 2.0 * d

    theta, _, iters, stalled = lbfgs_minimize(fun, np.zeros(50),
                                              max_iters=25)
    assert np.linalg.norm(theta - target) < 1e-10
    assert iters <= 25 and not stalled


def _mini_training_setup(seed=0):
    sc = scenario_preset("A1", {
        "seed": seed, "grid_cells": 16, "n_steps": 32, "sensor_every": 8,
        "sensors": 4, "n_collocation": 32, "n_boundary": 8, "n_initial": 4,
        "widths_u": (3, 8, 1), "widths_f": (2, 8, 1),
        "adam_steps": 14, "lbfgs_steps": 0, "weight_update_every": 5,
        "kernel_subsample": 16, "log_every": 1, "checkpoint_every": 7})
    prob_fd, grid = forward_problem(sc)
    series = solve_forward(prob_fd, grid)
    data = build_training_data(sc, series)
    return sc, make_bundle(sc), data


def test_adam_seed_determinism_and_bit_identical_resume(tmp_path):
    sc, bundle, data = _mini_training_setup()
    prob = sc.problem()
    for sub in ("a", "b", "c"):
        (tmp_path / sub).mkdir()
    r1 = run_training(prob, bundle, data, sc.train,
                      checkpoint_dir=str(tmp_path / "a"))
    r2 = run_training(prob, bundle, data, sc.train,
                      checkpoint_dir=str(tmp_path / "b"))
    np.testing.assert_array_equal(r1.bundle.params.data,
                                  r2.bundle.params.data)

    resume = load_resume_state(str(tmp_path / "a"), "step7")
    r3 = run_training(prob, bundle, data, sc.train,
                      checkpoint_dir=str(tmp_path / "c"),
                      resume_state=resume)
    np.testing.assert_array_equal(r3.bundle.params.data,
                                  r1.bundle.params.data)


# ---------------------------------------------------------------------------
# 6-9. scenario-level runs (desk scale; these dominate suite runtime)
# ---------------------------------------------------------------------------

def _run_cached(scenario_id, overrides, tag):
    """Train once per pytest session per tag; reuse the artifacts."""
    out = RUNS / tag
    if not (out / "metrics.json").exists():
        t0 = time.monotonic()
        run(scenario_id, overrides, out)
        (out / "elapsed.txt").write_text(str(time.monotonic() - t0))
    metrics = json.loads((out / "metrics.json").read_text())
    elapsed = float((out / "elapsed.txt").read_text())
    return metrics, elapsed


def test_scenario_a1_desk_scale_inversion():
    reports = []
    for seed in (0, 1, 2):
        metrics, elapsed = _run_cached("A1", {"seed": seed}, f"a1_s{seed}")
        assert elapsed < 30 * 60, f"seed {seed}: {elapsed:.0f}s"
        reports.append(metrics)

    def median(key_fn):
        return float(np.median([key_fn(m) for m in reports]))

    assert median(lambda m: m["scalars"]["Vx"]["rel_error"]) < 0.10
    assert median(lambda m: m["scalars"]["Vy"]["rel_error"]) < 0.10
    assert median(lambda m: m["scalars"]["D"]["rel_error"]) < 0.30
    assert median(lambda m: m["source_peak_error"]) < 0.1
    assert median(lambda m: m["fields"]["u_t1"]["rel_l2"]) < 0.10


def test_scenario_a2_accumulative_degrades_diffusion():
    acc, _ = _run_cached("A2", {"seed": 0, "noise": 0.10}, "a2_acc")
    pw, _ = _run_cached("A2", {"seed": 0, "noise": 0.10,
                               "sensor_kind": "pointwise"}, "a2_pw")
    assert acc["scalars"]["D"]["rel_error"] > pw["scalars"]["D"]["rel_error"]


def test_scenario_b_velocity_recovery():
    metrics, _ = _run_cached("B", {"seed": 0}, "b_s0")
    assert metrics["fields"]["V1"]["rel_l2"] < 0.20
    assert metrics["fields"]["V2"]["rel_l2"] < 0.20
    # the diffusion error is reported but unconstrained
    assert "D" in metrics["fields"]


def test_scenario_c_three_phase_smoke():
    out = RUNS / "c_s0"
    t0 = time.monotonic()
    if not (out / "metrics.json").exists():
        run("C", {"seed": 0}, out)
        (out / "elapsed.txt").write_text(str(time.monotonic() - t0))
    elapsed = float((out / "elapsed.txt").read_text())
    assert elapsed < 2 * 3600

    # all three phases appear in the loss history
    import csv as _csv
    with open(out / "loss_history.csv") as fh:
        phases = {row["phase"] for row in _csv.DictReader(fh)}
    assert {"pretrain", "adam", "lbfgs"} <= phases

    # the warm-start phase leaves every loss weight at 1
    with open(out / "weights.csv") as fh:
        rows = list(_csv.DictReader(fh))
    sc = scenario_preset("C")
    pre = [r for r in rows if int(r["step"]) <= sc.train.pretrain_steps]
    assert pre, "no weight row at the end of the warm start"
    for row in pre:
        for key, val in row.items():
            if key != "step" and val != "":
                assert float(val) == 1.0

    # recovered source is nonnegative at 1e4 random points
    from adeinv.runner import load_run_bundle, load_run_scenario
    sc = load_run_scenario(out)
    bundle = load_run_bundle(out, sc)
    pts = np.random.default_rng(0).uniform(0, 1, size=(10_000, 3))
    f_vals = mlp_eval(bundle.f_spec, bundle.net_params("f"), pts)[:, 0]
    assert np.all(f_vals >= 0.0)

    metrics = json.loads((out / "metrics.json").read_text())
    assert "Vz" in metrics["scalars"] and "Dh" in metrics["fields"]


# ---------------------------------------------------------------------------
# 10. residual kernel dominates the data kernel at initialization
# ---------------------------------------------------------------------------

def test_residual_trace_dominates_data_trace_at_init():
    sc0 = scenario_preset("A1", {"grid_cells": 32, "n_steps": 64})
    prob_fd, grid = forward_problem(sc0)
    series = solve_forward(prob_fd, grid)
    wins = 0
    for seed in range(5):
        sc = scenario_preset("A1", {"grid_cells": 32, "n_steps": 64,
                                    "seed": seed})
        data = build_training_data(sc, series)
        bundle = make_bundle(sc)
        prob = sc.problem()
        tr_rr = trace_fast(residual_jacobian(prob, bundle,
                                             data.collocation))
        tr_zz = trace_fast(observation_jacobian(prob, bundle, data.obs))
        wins += tr_rr > tr_zz
    assert wins >= 4, f"residual trace dominated in only {wins}/5 seeds"
