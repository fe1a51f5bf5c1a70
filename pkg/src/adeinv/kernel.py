"""Tangent-kernel blocks, traces, adaptive loss weights and spectra.

For each loss term the kernel block is K = J J^T where J holds the gradient
of every residual entry with respect to that term's parameters: the PDE
residual differentiates through all networks and learnable coefficients,
while boundary/initial/concentration terms touch only the solution network
and velocity-data terms only the velocity parameters.  Loss weights follow

    lambda_alpha = Tr(K) / Tr(K_alpha_alpha),   Tr(K) = sum over terms,

computed from unweighted traces; Tr(K_alpha_alpha) = ||J_alpha||_F^2 so no
kernel matrix is ever materialized for the weight update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tape, Var, batch_jacobian
from .networks import NetworkBundle, mlp_tape_streams
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
    "KernelBlocks", "DegenerateKernelError",
    "residual_jacobian", "boundary_jacobian", "initial_jacobian",
    "observation_jacobian", "observation_predictions",
    "velocity_data_jacobian", "adaptive_weights", "trace_fast",
    "kernel_matrix", "spectrum",
]

_TINY_TRACE = 1e-30


class DegenerateKernelError(NumericError):
    """Every kernel block has (numerically) zero trace."""


def trace_fast(jac: np.ndarray) -> float:
    """Tr(J J^T) without forming the kernel matrix."""
    return float(np.sum(jac * jac))


def kernel_matrix(jac: np.ndarray) -> np.ndarray:
    return jac @ jac.T


def spectrum(kernel: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric PSD kernel, descending; tiny negative
    round-off is clamped to zero."""
    eig = np.linalg.eigvalsh(0.5 * (kernel + kernel.T))[::-1].copy()
    if np.min(eig) < -1e-10 * max(1.0, float(np.max(np.abs(eig)))):
        raise NumericError("kernel matrix is not positive semidefinite")
    eig[eig < 0.0] = 0.0
    return eig


@dataclass
class KernelBlocks:
    """Per-term Jacobians of the stacked residual entries.

    When a term's rows are a uniform subsample of a larger batch,
    `trace_scale[term]` holds the ratio full/sampled so that `trace`
    reports an unbiased estimate of the full-batch trace; the materialized
    kernel matrix and its spectrum stay at the sampled size.
    """

    jacobians: dict[str, np.ndarray]
    trace_scale: dict[str, float] = None

    def trace(self, term: str) -> float:
        scale = (self.trace_scale or {}).get(term, 1.0)
        return scale * trace_fast(self.jacobians[term])

    def traces(self) -> dict[str, float]:
        return {term: self.trace(term) for term in self.jacobians}

    def matrix(self, term: str) -> np.ndarray:
        return kernel_matrix(self.jacobians[term])

    def spectrum(self, term: str) -> np.ndarray:
        return spectrum(self.matrix(term))

    def cross_matrix(self, a: str, b: str) -> np.ndarray:
        """Off-diagonal block J_a J_b^T over the shared parameter columns
        (valid only when both Jacobians use the same column layout)."""
        ja, jb = self.jacobians[a], self.jacobians[b]
        if ja.shape[1] != jb.shape[1]:
            raise ValueError(
                f"blocks {a} and {b} differentiate different parameters")
        return ja @ jb.T


def adaptive_weights(blocks: KernelBlocks,
                     previous: dict[str, float] | None = None
                     ) -> dict[str, float]:
    """lambda_alpha = (sum of traces) / trace_alpha.

    A term whose trace has collapsed below 1e-30 keeps its previous weight
    (1.0 if there is none); if every trace collapses the kernel is
    degenerate and training should stop.
    """
    traces = blocks.traces()
    total = sum(traces.values())
    if total <= _TINY_TRACE:
        raise DegenerateKernelError(
            "all kernel traces vanished; nothing left to balance")
    out = {}
    for term, tr in traces.items():
        if tr <= _TINY_TRACE:
            out[term] = (previous or {}).get(term, 1.0)
        else:
            out[term] = total / tr
    return out


def _u_leaves(groups: dict) -> list[Var]:
    return groups["u"]


def residual_jacobian(prob: ProblemDef, bundle: NetworkBundle,
                      pts: np.ndarray) -> np.ndarray:
    """(N, P) gradient rows of the PDE residual w.r.t. every learnable
    parameter, columns in bundle layout order (u, f, velocity, diffusion)."""
    tape = Tape()
    groups = bind_params(tape, bundle)
    res = residual_batch(tape, prob, bundle, groups, pts)
    leaves = [v for _, v in groups["ordered"]]
    return batch_jacobian(res, leaves)


def boundary_jacobian(prob: ProblemDef, bundle: NetworkBundle,
                      pts: np.ndarray, bc: str,
                      normals: np.ndarray | None = None,
                      scale_by_dz: bool = False) -> np.ndarray:
    """(N, P_u) rows of the boundary residual w.r.t. the solution network."""
    tape = Tape()
    groups = bind_params(tape, bundle)
    if bc == "neumann":
        res = neumann_batch(tape, prob, bundle, groups, pts, normals,
                            scale_by_dz=scale_by_dz)
    elif bc == "dirichlet":
        res = dirichlet_batch(tape, prob, bundle, groups, pts)
    else:
        raise ValueError(f"unknown bc {bc}")
    return batch_jacobian(res, _u_leaves(groups))


def initial_jacobian(prob: ProblemDef, bundle: NetworkBundle,
                     pts: np.ndarray) -> np.ndarray:
    tape = Tape()
    groups = bind_params(tape, bundle)
    res = initial_batch(tape, prob, bundle, groups, pts)
    return batch_jacobian(res, _u_leaves(groups))


def _aggregate_rows(rows: np.ndarray, weights: np.ndarray,
                    owner: np.ndarray, n_obs: int) -> np.ndarray:
    out = np.zeros((n_obs,) + rows.shape[1:])
    np.add.at(out, owner, weights.reshape((-1,) + (1,) * (rows.ndim - 1))
              * rows)
    return out


def observation_predictions(bundle: NetworkBundle,
                            obs: ObservationSet) -> np.ndarray:
    """Predicted observation values (pointwise or window means) as floats."""
    from .networks import mlp_eval

    pts, wts, owner = obs.quadrature()
    vals = mlp_eval(bundle.u_spec, bundle.net_params("u"), pts)[:, 0]
    out = np.zeros(len(obs))
    np.add.at(out, owner, wts * vals)
    return out


def observation_jacobian(prob: ProblemDef, bundle: NetworkBundle,
                         obs: ObservationSet) -> np.ndarray:
    """(N_obs, P_u) rows of predicted-minus-observed concentration values.

    Window (accumulative) rows are the quadrature-weighted combination of
    pointwise rows, matching how the prediction itself is formed.
    """
    pts, wts, owner = obs.quadrature()
    tape = Tape()
    groups = bind_params(tape, bundle)
    u = mlp_tape_streams(tape, bundle.u_spec, groups["u"], pts,
                         need_grad=False, need_hess=False)
    rows = batch_jacobian(u.value, _u_leaves(groups))
    return _aggregate_rows(rows, wts, owner, len(obs))


def velocity_data_jacobian(prob: ProblemDef, bundle: NetworkBundle,
                           inputs: np.ndarray) -> np.ndarray:
    """(n_out*T, P_v) rows of the velocity-net outputs at measurement
    inputs (T, n_in), stacked component-major (all V1 rows, then V2, ...)."""
    if bundle.v_spec is None:
        raise ValueError("no velocity network in this bundle")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, 1)
    tape = Tape()
    groups = bind_params(tape, bundle)
    v = mlp_tape_streams(tape, bundle.v_spec, groups["v"], inputs,
                         need_grad=False, need_hess=False)
    # select components with constant one-hot matmuls, then stack
    n_out = bundle.v_spec.n_out
    jacs = []
    for j in range(n_out):
        sel = np.zeros((n_out, 1))
        sel[j, 0] = 1.0
        comp = tape.matmul(v.value, tape.const(sel))
        jacs.append(batch_jacobian(comp, groups["v"]))
    return np.concatenate(jacs, axis=0)
