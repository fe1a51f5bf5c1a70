"""Loss assembly and the optimization drivers (Adam, then L-BFGS).

The composite objective is

    L = lam_r L_r + lam_b L_b + lam_z L_z (+ lam_v L_v)

with mean-squared residual, boundary/initial, concentration-data and
(optionally) velocity-data terms.  Training runs in phases: an optional
data-only warm start, an Adam phase during which the loss weights are
refreshed from kernel traces on a fixed cadence, and a final L-BFGS phase
with the weights frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NumericError, Tape, Var, reverse_grad
from .kernel import (
    KernelBlocks,
    adaptive_weights,
    boundary_jacobian,
    initial_jacobian,
    observation_jacobian,
    residual_jacobian,
    velocity_data_jacobian,
)
from .networks import NetworkBundle, mlp_tape_streams, save_checkpoint
from .observations import ObservationSet
from .pde import (
    ProblemDef,
    bind_params,
    dirichlet_batch,
    initial_batch,
    neumann_batch,
    residual_batch,
)

__all__ = [
    "BoundaryGroup", "TrainingData", "TrainConfig", "TrainResult",
    "LossBreakdown", "AdamState", "adam_step", "lbfgs_minimize",
    "loss_and_grad", "evaluate_loss", "run_training", "load_resume_state",
    "compute_kernel_blocks",
]


@dataclass(frozen=True)
class BoundaryGroup:
    """A batch of boundary points sharing one condition type."""

    pts: np.ndarray                       # (N, dim+1)
    bc: str                               # neumann | dirichlet
    normals: np.ndarray | None = None     # (N, dim) for neumann
    scale_by_dz: bool = False


@dataclass
class TrainingData:
    """Everything the loss sees: collocation points, boundary/initial
    batches, concentration observations and optional velocity data."""

    collocation: np.ndarray               # (N_r, dim+1)
    boundary_groups: list[BoundaryGroup] = field(default_factory=list)
    initial_pts: np.ndarray | None = None
    obs: ObservationSet | None = None
    velocity_inputs: np.ndarray | None = None  # (T, n_in) net inputs
    velocity_values: np.ndarray | None = None   # (T, n_out) measured V

    def terms(self) -> list[str]:
        out = ["residual"]
        if self.boundary_groups or self.initial_pts is not None:
            out.append("boundary")
        if self.obs is not None and len(self.obs):
            out.append("data")
        if self.velocity_inputs is not None:
            out.append("velocity")
        return out


@dataclass
class TrainConfig:
    pretrain_steps: int = 0
    adam_steps: int = 1000
    lbfgs_steps: int = 500
    adam_lr: float = 1e-3
    weight_update_every: int = 100
    kernel_subsample: int = 200
    kernel_seed: int = 0
    gamma_lr_scale: float = 10.0          # Adam lr multiplier on the scalars
    lbfgs_memory: int = 20
    lbfgs_lr: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0             # 0 = only at phase ends


@dataclass
class LossBreakdown:
    total: float
    terms: dict[str, float]               # unweighted mean-squared values
    weights: dict[str, float]


@dataclass
class TrainResult:
    bundle: NetworkBundle
    loss_history: list[dict]              # {"step", "phase", "total", terms...}
    weight_history: list[dict]            # {"step", term weights...}
    final: LossBreakdown


def _assemble_loss(tape: Tape, prob: ProblemDef, bundle: NetworkBundle,
                   groups: dict, data: TrainingData,
                   weights: dict[str, float],
                   include: set[str]) -> tuple[Var, dict[str, Var]]:
    terms: dict[str, Var] = {}

    if "residual" in include:
        r = residual_batch(tape, prob, bundle, groups, data.collocation)
        terms["residual"] = tape.mean(tape.square(r))

    if "boundary" in include and ("boundary" in data.terms()):
        pieces: list[tuple[Var, int]] = []
        for grp in data.boundary_groups:
            if grp.bc == "neumann":
                res = neumann_batch(tape, prob, bundle, groups, grp.pts,
                                    grp.normals, scale_by_dz=grp.scale_by_dz)
            else:
                res = dirichlet_batch(tape, prob, bundle, groups, grp.pts)
            pieces.append((res, grp.pts.shape[0]))
        if data.initial_pts is not None:
            res = initial_batch(tape, prob, bundle, groups, data.initial_pts)
            pieces.append((res, data.initial_pts.shape[0]))
        n_total = sum(n for _, n in pieces)
        acc = None
        for res, _ in pieces:
            s = tape.sum(tape.square(res))
            acc = s if acc is None else acc + s
        terms["boundary"] = tape.mul(tape.const(1.0 / n_total), acc)

    if "data" in include and data.obs is not None and len(data.obs):
        pts, agg = data.obs.aggregation()
        u = mlp_tape_streams(tape, bundle.u_spec, groups["u"], pts,
                             need_grad=False, need_hess=False)
        pred = tape.matmul(tape.const(agg), u.value)
        resid = pred - tape.const(data.obs.noisy[:, None])
        terms["data"] = tape.mean(tape.square(resid))

    if "velocity" in include and data.velocity_inputs is not None:
        v = mlp_tape_streams(tape, bundle.v_spec, groups["v"],
                             data.velocity_inputs,
                             need_grad=False, need_hess=False)
        resid = v.value - tape.const(data.velocity_values)
        terms["velocity"] = tape.mean(tape.square(resid))

    total = None
    for name, term in terms.items():
        w = tape.mul(tape.const(float(weights.get(name, 1.0))), term)
        total = w if total is None else total + w
    return total, terms


def _check_finite(terms: dict[str, Var]) -> None:
    for name, var in terms.items():
        if not np.all(np.isfinite(var.value)):
            raise NumericError(f"loss term '{name}' became non-finite")


def evaluate_loss(prob: ProblemDef, bundle: NetworkBundle,
                  data: TrainingData, weights: dict[str, float],
                  include: set[str] | None = None) -> LossBreakdown:
    include = include or set(data.terms())
    tape = Tape()
    groups = bind_params(tape, bundle)
    total, terms = _assemble_loss(tape, prob, bundle, groups, data,
                                  weights, include)
    _check_finite(terms)
    return LossBreakdown(
        total=float(total.value),
        terms={k: float(v.value) for k, v in terms.items()},
        weights={k: float(weights.get(k, 1.0)) for k in terms})


def loss_and_grad(prob: ProblemDef, bundle: NetworkBundle, theta: np.ndarray,
                  data: TrainingData, weights: dict[str, float],
                  include: set[str] | None = None
                  ) -> tuple[float, np.ndarray, dict[str, float]]:
    include = include or set(data.terms())
    b = bundle.with_params(theta)
    tape = Tape()
    groups = bind_params(tape, b)
    total, terms = _assemble_loss(tape, prob, b, groups, data, weights,
                                  include)
    _check_finite(terms)
    grads = reverse_grad(total, [v for _, v in groups["ordered"]])
    flat = np.concatenate([g.ravel() for g in grads])
    return (float(total.value), flat,
            {k: float(v.value) for k, v in terms.items()})


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray,
              lr) -> np.ndarray:
    """One Adam update; `lr` may be a scalar or a per-coordinate vector."""
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return theta - lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# L-BFGS with Armijo backtracking
# ---------------------------------------------------------------------------

def lbfgs_minimize(fun, theta0: np.ndarray, max_iters: int,
                   memory: int = 20, lr: float = 1.0,
                   tol_grad: float = 1e-12,
                   callback=None,
                   precond: np.ndarray | None = None
                   ) -> tuple[np.ndarray, float, int, bool]:
    """Minimize fun(theta) -> (value, gradient).

    Two-loop recursion with sT y / yT y scaling of the seed Hessian and an
    Armijo (c1 = 1e-4) backtracking line search whose trial step starts at
    `lr`.  `precond`, if given, is a positive per-coordinate diagonal that
    replaces the identity seed Hessian (coordinates known to need larger
    steps get entries > 1).  Curvature pairs with sT y <= 1e-10 are
    discarded.  Returns (theta, value, iterations used, stalled); `stalled`
    is set when 20 backtracks fail to reduce the loss, after which the last
    accepted iterate is returned unchanged.
    """
    theta = theta0.copy()
    val, grad = fun(theta)
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    it = 0
    stalled = False
    prev_step = None
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol_grad:
            break
        q = grad.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((a, rho))
            q -= a * y
        if y_list:
            s, y = s_list[-1], y_list[-1]
            q *= float(s @ y) / float(y @ y)
        if precond is not None:
            q *= precond
        for (a, rho), s, y in zip(reversed(alphas), s_list, y_list):
            b = rho * float(y @ q)
            q += (a - b) * s
        direction = -q
        slope = float(grad @ direction)
        if slope >= 0.0:  # not a descent direction: restart from steepest
            direction = -grad
            slope = -gnorm * gnorm
            s_list.clear()
            y_list.clear()
        # trial step: gradient-scaled before any curvature pairs exist (a raw
        # steepest-descent leap can be destructive), then warm-started from
        # the previous accepted step so a backtracked step length is not
        # re-discovered from scratch every iteration
        if not s_list:
            step = min(lr, 1.0 / (1.0 + gnorm))
        else:
            step = lr if prev_step is None else min(lr, 2.0 * prev_step)
        ok = False
        for _ in range(20):
            cand = theta + step * direction
            try:
                cval, cgrad = fun(cand)
            except NumericError:
                step *= 0.5
                continue
            if cval <= val + 1e-4 * step * slope:
                ok = True
                break
            step *= 0.5
        if not ok:
            stalled = True
            break  # line search stalled; keep the last accepted iterate
        prev_step = step
        s = cand - theta
        y = cgrad - grad
        if float(s @ y) > 1e-10:
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        theta, val, grad = cand, cval, cgrad
        if callback is not None:
            callback(it, theta, val, grad)
    return theta, val, it, stalled


# ---------------------------------------------------------------------------
# kernel-trace weight refresh
# ---------------------------------------------------------------------------

def _subsample(rng: np.random.Generator, n: int, cap: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return rng.choice(n, size=cap, replace=False)


def compute_kernel_blocks(prob: ProblemDef, bundle: NetworkBundle,
                          data: TrainingData, cap: int,
                          rng: np.random.Generator) -> KernelBlocks:
    """Jacobian blocks for the weight update: the residual batch is
    subsampled to `cap` rows (its trace is rescaled to estimate the
    full-batch trace), the (smaller) boundary/data/velocity batches are
    used in full."""
    jacs: dict[str, np.ndarray] = {}
    n_col = data.collocation.shape[0]
    idx = _subsample(rng, n_col, cap)
    jacs["residual"] = residual_jacobian(prob, bundle, data.collocation[idx])
    scale = {"residual": n_col / len(idx)}

    rows = []
    for grp in data.boundary_groups:
        rows.append(boundary_jacobian(prob, bundle, grp.pts, grp.bc,
                                      grp.normals,
                                      scale_by_dz=grp.scale_by_dz))
    if data.initial_pts is not None:
        rows.append(initial_jacobian(prob, bundle, data.initial_pts))
    if rows:
        jacs["boundary"] = np.concatenate(rows, axis=0)

    if data.obs is not None and len(data.obs):
        jacs["data"] = observation_jacobian(prob, bundle, data.obs)

    if data.velocity_inputs is not None:
        jacs["velocity"] = velocity_data_jacobian(prob, bundle,
                                                  data.velocity_inputs)
    return KernelBlocks(jacobians=jacs, trace_scale=scale)


# ---------------------------------------------------------------------------
# phase driver
# ---------------------------------------------------------------------------

def run_training(prob: ProblemDef, bundle: NetworkBundle, data: TrainingData,
                 cfg: TrainConfig, checkpoint_dir=None,
                 resume_state: dict | None = None) -> TrainResult:
    """Warm start (optional) -> Adam with periodic weight refresh -> L-BFGS
    with frozen weights."""
    theta = bundle.params.data.copy()
    # Adam's per-coordinate step is capped near lr, but the transport scalars
    # start at 1.0 and may need to travel O(1)..O(5) in raw coordinates, so
    # they get a larger rate than the network weights.
    lr_vec = np.full(theta.size, cfg.adam_lr)
    gamma_mask = np.zeros(theta.size, dtype=bool)
    for name, sl in bundle.params.segment_slices().items():
        if name.startswith("gamma."):
            lr_vec[sl] = cfg.adam_lr * cfg.gamma_lr_scale
            # velocity scalars are exempt from the lr decay below; they tend
            # to cross their target late in the phase and throttling them
            # leaves the trip to the L-BFGS budget.  The reparameterized
            # diffusion scalar is NOT exempt: its early-training gradient
            # transiently favors tiny D, and full late-phase speed makes it
            # overshoot far below the value it must climb back to.
            gamma_mask[sl] = not name.endswith("rhoD")
    all_terms = set(data.terms())
    data_only = all_terms - {"residual"}
    weights = {t: 1.0 for t in all_terms}
    loss_history: list[dict] = []
    weight_history: list[dict] = []
    rng = np.random.default_rng(cfg.kernel_seed)
    adam = AdamState.create(theta.size)
    start_step = 0

    if resume_state is not None:
        theta = resume_state["theta"].copy()
        adam = AdamState(m=resume_state["adam_m"].copy(),
                         v=resume_state["adam_v"].copy(),
                         t=int(resume_state["adam_t"]))
        weights = dict(resume_state["weights"])
        start_step = int(resume_state["step"])
        rng = np.random.default_rng(cfg.kernel_seed)
        # replay the generator to the point where the run stopped
        n_updates = sum(
            1 for s in range(cfg.pretrain_steps + 1, start_step)
            if (s - cfg.pretrain_steps) % cfg.weight_update_every == 0)
        for _ in range(n_updates):
            _consume_kernel_draws(rng, data, cfg.kernel_subsample)

    def log(step: int, phase: str, total: float, terms: dict[str, float]):
        loss_history.append({"step": step, "phase": phase, "total": total,
                             **terms})

    def save_state(step: int, tag: str):
        if checkpoint_dir is None:
            return
        b = bundle.with_params(theta)
        save_checkpoint(
            f"{checkpoint_dir}/params_{tag}.bin", b.specs(), b.params,
            extra={"step": step, "weights": weights})
        np.savez(f"{checkpoint_dir}/optimizer_{tag}.npz",
                 adam_m=adam.m, adam_v=adam.v, adam_t=adam.t, step=step,
                 weights_json=json.dumps(weights))

    # --- phase 0: data-only warm start (weights pinned at 1) ---------------
    for step in range(start_step, cfg.pretrain_steps):
        total, grad, terms = loss_and_grad(prob, bundle, theta, data,
                                           {t: 1.0 for t in data_only},
                                           include=data_only)
        theta = adam_step(adam, theta, grad, lr_vec)
        if step % cfg.log_every == 0:
            log(step, "pretrain", total, terms)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_state(step + 1, f"step{step + 1}")

    # --- phase 1: Adam on the full objective with weight refresh -----------
    adam_end = cfg.pretrain_steps + cfg.adam_steps
    if start_step <= cfg.pretrain_steps and cfg.adam_steps > 0:
        # weights start at 1 and hold for the first refresh interval
        weight_history.append({"step": cfg.pretrain_steps, **weights})
    for step in range(max(start_step, cfg.pretrain_steps), adam_end):
        if (step > cfg.pretrain_steps
                and (step - cfg.pretrain_steps) % cfg.weight_update_every == 0):
            blocks = compute_kernel_blocks(prob, bundle.with_params(theta),
                                           data, cfg.kernel_subsample, rng)
            weights = adaptive_weights(blocks, previous=weights)
            weight_history.append({"step": step, **weights})
        total, grad, terms = loss_and_grad(prob, bundle, theta, data, weights)
        # cosine decay to 10% of the base rate over the phase: the early
        # steps need reach, the late ones precision, and the L-BFGS phase
        # inherits whatever point this phase ends on.
        frac = (step - cfg.pretrain_steps) / max(cfg.adam_steps, 1)
        mult = 0.1 + 0.45 * (1.0 + np.cos(np.pi * frac))
        lr_step = np.where(gamma_mask, lr_vec, lr_vec * mult)
        theta = adam_step(adam, theta, grad, lr_step)
        if step % cfg.log_every == 0:
            log(step, "adam", total, terms)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_state(step + 1, f"step{step + 1}")
    save_state(adam_end, "adam_end")

    # --- phase 2: L-BFGS with frozen weights --------------------------------
    if cfg.lbfgs_steps > 0:
        def objective(th):
            total, grad, _ = loss_and_grad(prob, bundle, th, data, weights)
            return total, grad

        def cb(it, th, val, grad):
            if it % cfg.log_every == 0:
                log(adam_end + it, "lbfgs", val, {})

        theta, _, _, _ = lbfgs_minimize(objective, theta, cfg.lbfgs_steps,
                                        memory=cfg.lbfgs_memory,
                                        lr=cfg.lbfgs_lr, callback=cb,
                                        precond=lr_vec / cfg.adam_lr)

    final_bundle = bundle.with_params(theta)
    final = evaluate_loss(prob, final_bundle, data, weights)
    log(adam_end + cfg.lbfgs_steps, "final", final.total, final.terms)
    save_state(adam_end + cfg.lbfgs_steps, "final")
    return TrainResult(bundle=final_bundle, loss_history=loss_history,
                       weight_history=weight_history, final=final)


def load_resume_state(checkpoint_dir, tag: str) -> dict:
    """Reload a (params, optimizer) checkpoint pair for run_training."""
    from .networks import load_checkpoint

    _, params, extra = load_checkpoint(f"{checkpoint_dir}/params_{tag}.bin")
    opt = np.load(f"{checkpoint_dir}/optimizer_{tag}.npz")
    return {
        "theta": params.data.copy(),
        "adam_m": opt["adam_m"], "adam_v": opt["adam_v"],
        "adam_t": int(opt["adam_t"]), "step": int(opt["step"]),
        "weights": json.loads(str(opt["weights_json"])),
    }


def _consume_kernel_draws(rng: np.random.Generator, data: TrainingData,
                          cap: int) -> None:
    """Advance the generator exactly as one kernel refresh would."""
    _subsample(rng, data.collocation.shape[0], cap)
