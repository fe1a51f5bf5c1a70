"""Dense-array autodiff: a small reverse-mode tape plus forward-mode jets.

The tape records a fixed set of primitives (add, mul, matmul, tanh, square,
softplus, sum, mean) over float64 numpy arrays.  Reverse mode gives loss
gradients with respect to parameter leaves; forward-mode jets carry first and
diagonal-second derivatives with respect to network inputs and are built from
the same primitives so that parameter gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Jet",
    "ParamVector",
    "reverse_grad",
    "jacobian_rows",
    "batch_jacobian",
    "TapeError",
    "NumericError",
]


class TapeError(Exception):
    """Structural misuse of the tape (bad shapes, non-scalar root...)."""


class NumericError(Exception):
    """Non-finite values encountered during a pass."""


@dataclass
class ParamVector:
    """Flat float64 parameter storage with a named segment layout.

    layout entries are (name, shape) in storage order; pack/unpack round-trips
    exactly.
    """

    data: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if self.data.size != total:
            raise TapeError(
                f"param vector length {self.data.size} != layout total {total}"
            )

    @classmethod
    def pack(cls, arrays: list[tuple[str, np.ndarray]]) -> "ParamVector":
        layout = [(name, tuple(a.shape)) for name, a in arrays]
        if arrays:
            data = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in arrays])
        else:
            data = np.zeros(0)
        return cls(data=data, layout=layout)

    def unpack(self) -> list[tuple[str, np.ndarray]]:
        out = []
        ofs = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out.append((name, self.data[ofs:ofs + n].reshape(shape)))
            ofs += n
        return out

    def segment_slices(self) -> dict[str, slice]:
        slices = {}
        ofs = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            slices[name] = slice(ofs, ofs + n)
            ofs += n
        return slices

    def copy(self) -> "ParamVector":
        return ParamVector(data=self.data.copy(), layout=list(self.layout))

    @property
    def size(self) -> int:
        return self.data.size


@dataclass
class Jet:
    """Value plus first and diagonal-second input derivatives at one point."""

    value: np.ndarray        # (out,)
    grad: np.ndarray         # (d_in, out)
    diag_hess: np.ndarray    # (d_in, out)


_OPS = ("leaf", "const", "add", "mul", "matmul", "tanh", "square",
        "softplus", "sum", "mean")


@dataclass
class _Node:
    op: str
    parents: tuple
    value: np.ndarray


@dataclass
class Var:
    """Handle to one tape node."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul(self, self.tape.const(-1.0))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable logistic; softplus'(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inv_softplus(y: float) -> float:
    """Solve softplus(x) = y for y > 0."""
    if y <= 0:
        raise ValueError("softplus range is (0, inf)")
    return y + np.log(-np.expm1(-y)) if y > 30 else np.log(np.expm1(y))


class Tape:
    """Append-only op recorder.  Single-writer; nodes are topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []

    # -- node constructors -------------------------------------------------

    def _push(self, op: str, parents: tuple, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(op, parents, value))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        """Differentiable input (parameter) node."""
        return self._push("leaf", (), value)

    def const(self, value) -> Var:
        """Non-differentiable input node."""
        return self._push("const", (), value)

    def add(self, a: Var, b: Var) -> Var:
        return self._push("add", (a.idx, b.idx), a.value + b.value)

    def mul(self, a: Var, b: Var) -> Var:
        return self._push("mul", (a.idx, b.idx), a.value * b.value)

    def matmul(self, a: Var, b: Var) -> Var:
        return self._push("matmul", (a.idx, b.idx), a.value @ b.value)

    def tanh(self, a: Var) -> Var:
        return self._push("tanh", (a.idx,), np.tanh(a.value))

    def square(self, a: Var) -> Var:
        return self._push("square", (a.idx,), a.value * a.value)

    def softplus(self, a: Var) -> Var:
        return self._push("softplus", (a.idx,), softplus_np(a.value))

    def sum(self, a: Var) -> Var:
        return self._push("sum", (a.idx,), np.sum(a.value))

    def mean(self, a: Var) -> Var:
        return self._push("mean", (a.idx,), np.mean(a.value))

    # -- diagnostics ---------------------------------------------------------

    def first_nonfinite(self) -> int | None:
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                return i
        return None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce grad to `shape` by summing the axes numpy broadcasting added."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _unbroadcast_keep_batch(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Per-sample variant: keep grad's leading batch axis, reduce the rest to
    `shape`.  Result has shape (N,) + shape."""
    grad = np.asarray(grad)
    n = grad.shape[0]
    rest = grad.shape[1:]
    while len(rest) > len(shape):
        grad = grad.sum(axis=1)
        rest = grad.shape[1:]
    # pad missing leading dims of shape
    for ax, m in enumerate(shape):
        if m == 1 and grad.shape[1 + ax] != 1:
            grad = grad.sum(axis=1 + ax, keepdims=True)
    return grad.reshape((n,) + tuple(shape))


def _backward(tape: Tape, root: int, seed: np.ndarray,
              want: set[int], per_sample: bool = False,
              batch_n: int | None = None) -> dict[int, np.ndarray]:
    """Adjoint sweep from `root` seeded with `seed`.

    In per_sample mode the graph must be sample-diagonal (no op may mix rows
    along axis 0 on the path to a wanted leaf); intermediate adjoints keep
    whatever batch axis they acquired and only leaf accumulation reduces, with
    the batch axis preserved.
    """
    nodes = tape.nodes
    adjoint: list = [None] * (root + 1)
    adjoint[root] = np.asarray(seed, dtype=np.float64)
    grads: dict[int, np.ndarray] = {}

    def leaf_acc(j: int, g: np.ndarray):
        pnode = nodes[j]
        if per_sample:
            g = np.asarray(g)
            if g.ndim == 0 or (batch_n is not None and
                               (g.ndim <= len(pnode.value.shape) or
                                g.shape[0] != batch_n)):
                g = np.broadcast_to(g, (batch_n,) + pnode.value.shape)
            g = _unbroadcast_keep_batch(g, pnode.value.shape)
        else:
            g = _unbroadcast(g, pnode.value.shape)
        if j in grads:
            grads[j] = grads[j] + g
        else:
            grads[j] = g

    for i in range(root, -1, -1):
        a = adjoint[i]
        adjoint[i] = None
        if a is None:
            continue
        node = nodes[i]
        op = node.op
        if op in ("leaf", "const"):
            if i in want:
                leaf_acc(i, a)
            continue

        def acc(j: int, g: np.ndarray):
            pnode = nodes[j]
            if pnode.op in ("leaf", "const"):
                if j in want:
                    leaf_acc(j, g)
                elif pnode.op == "leaf":
                    pass  # unreachable-for-caller leaf; drop
                return
            if not per_sample:
                g = _unbroadcast(g, pnode.value.shape)
            # per-sample: keep the (possibly broadcast-extended) adjoint
            if adjoint[j] is None:
                adjoint[j] = g
            else:
                adjoint[j] = adjoint[j] + g

        if op == "add":
            pa, pb = node.parents
            acc(pa, a)
            acc(pb, a)
        elif op == "mul":
            pa, pb = node.parents
            acc(pa, a * nodes[pb].value)
            acc(pb, a * nodes[pa].value)
        elif op == "matmul":
            pa, pb = node.parents
            A, B = nodes[pa].value, nodes[pb].value
            a2 = np.asarray(a)
            # adjoint w.r.t. B
            if nodes[pb].op in ("leaf", "const") and pb not in want:
                pass
            elif per_sample and nodes[pb].op in ("leaf", "const"):
                # per-sample weight gradient: keep the row axis
                Ab = A if (A.ndim == 2 and batch_n is not None
                           and A.shape[0] == batch_n) else \
                    np.broadcast_to(A, (batch_n, A.shape[-1]))
                ab = a2 if a2.shape[0] == batch_n else \
                    np.broadcast_to(a2, (batch_n,) + a2.shape[1:])
                grad_b = np.einsum("na,nb->nab", Ab, ab)
                if pb in grads:
                    grads[pb] = grads[pb] + grad_b
                else:
                    grads[pb] = grad_b
            else:
                if A.ndim == 2 and a2.ndim == 2:
                    acc(pb, A.T @ a2)
                elif A.ndim == 1 and a2.ndim == 1:
                    acc(pb, np.outer(A, a2))
                else:
                    acc(pb, np.tensordot(A, a2, axes=(0, 0)))
            # adjoint w.r.t. A
            if not (nodes[pa].op in ("leaf", "const") and pa not in want):
                if B.ndim == 2:
                    acc(pa, a2 @ B.T)
                else:  # B 1-D: out = A @ B contracts A's last axis
                    acc(pa, np.multiply.outer(a2, B))
        elif op == "tanh":
            (pa,) = node.parents
            acc(pa, a * (1.0 - node.value * node.value))
        elif op == "square":
            (pa,) = node.parents
            acc(pa, a * 2.0 * nodes[pa].value)
        elif op == "softplus":
            (pa,) = node.parents
            acc(pa, a * _sigmoid(nodes[pa].value))
        elif op == "sum":
            (pa,) = node.parents
            acc(pa, np.broadcast_to(a, nodes[pa].value.shape))
        elif op == "mean":
            (pa,) = node.parents
            sz = nodes[pa].value.size
            acc(pa, np.broadcast_to(a / sz, nodes[pa].value.shape))
        else:  # pragma: no cover
            raise TapeError(f"unknown op {op}")
    return grads


def reverse_grad(loss_root: Var, param_leaves: list[Var]) -> list[np.ndarray]:
    """Gradient of a scalar root w.r.t. each parameter leaf.

    Leaves not reachable from the root get exact zeros.  Raises NumericError
    naming the first offending node if the forward values are non-finite.
    """
    root_val = loss_root.value
    if root_val.size != 1:
        raise TapeError(f"loss root must be scalar, got shape {root_val.shape}")
    if not np.isfinite(root_val):
        tape = loss_root.tape
        bad = tape.first_nonfinite()
        op = tape.nodes[bad].op if bad is not None else "?"
        raise NumericError(f"non-finite forward value at node {bad} (op={op})")
    want = {p.idx for p in param_leaves}
    grads = _backward(loss_root.tape, loss_root.idx, np.asarray(1.0), want)
    out = []
    for p in param_leaves:
        g = grads.get(p.idx)
        if g is None:
            g = np.zeros_like(p.value)
        out.append(np.asarray(g, dtype=np.float64).reshape(p.value.shape))
    return out


def jacobian_rows(output_nodes: list[Var], param_leaves: list[Var]) -> np.ndarray:
    """Row i = reverse_grad of scalar output i; columns follow param order."""
    rows = []
    for out in output_nodes:
        gs = reverse_grad(out, param_leaves)
        rows.append(np.concatenate([g.ravel() for g in gs]))
    return np.asarray(rows)


def batch_jacobian(output: Var, param_leaves: list[Var]) -> np.ndarray:
    """Per-sample Jacobian of a batched output node.

    `output` must have leading batch axis N and be sample-diagonal in that
    axis (each row depends only on row-local values plus shared parameters);
    all MLP/jet graphs built here satisfy this.  Returns (N, P).
    """
    val = output.value
    if val.ndim == 0:
        raise TapeError("batch_jacobian needs a batched (non-scalar) output")
    n = val.shape[0]
    if not np.all(np.isfinite(val)):
        raise NumericError("non-finite values in jacobian output")
    want = {p.idx for p in param_leaves}
    seed = np.ones_like(val)
    grads = _backward(output.tape, output.idx, seed, want, per_sample=True,
                      batch_n=n)
    cols = []
    for p in param_leaves:
        g = grads.get(p.idx)
        if g is None:
            g = np.zeros((n,) + p.value.shape)
        cols.append(np.asarray(g).reshape(n, -1))
    return np.concatenate(cols, axis=1)
