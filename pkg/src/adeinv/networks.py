"""Feedforward tanh MLPs for the solution, source, velocity and diffusion.

All hidden layers use tanh, outputs are linear with an optional positivity
transform (softplus or square).  Parameters live in a ParamVector whose
layout is one (name, shape) segment per weight/bias array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Jet,
    ParamVector,
    Tape,
    TapeError,
    Var,
    inv_softplus,
    softplus_np,
)

__all__ = [
    "MLPSpec",
    "NetworkBundle",
    "init_mlp",
    "mlp_eval",
    "jet_forward",
    "gamma_init",
    "mlp_tape_streams",
    "save_checkpoint",
    "load_checkpoint",
]

_TRANSFORMS = ("none", "softplus", "square")


@dataclass(frozen=True)
class MLPSpec:
    """widths = [input, hidden..., output]; tanh hidden, linear output."""

    widths: tuple[int, ...]
    output_transform: str = "none"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise TapeError(f"bad widths {self.widths}")
        if self.output_transform not in _TRANSFORMS:
            raise TapeError(f"unknown transform {self.output_transform}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for i in range(len(self.widths) - 1):
            shapes.append((f"W{i}", (self.widths[i], self.widths[i + 1])))
            shapes.append((f"b{i}", (self.widths[i + 1],)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


def init_mlp(spec: MLPSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in spec.layer_shapes():
        if name.startswith("W"):
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays.append((name, rng.uniform(-bound, bound, size=shape)))
        else:
            arrays.append((name, np.zeros(shape)))
    return ParamVector.pack(arrays)


def _apply_transform_np(y: np.ndarray, transform: str) -> np.ndarray:
    if transform == "softplus":
        return softplus_np(y)
    if transform == "square":
        return y * y
    return y


def mlp_eval(spec: MLPSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Forward pass at points x (d,) or (N, d); transform applied last."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != spec.n_in:
        raise TapeError(f"input dim {a.shape[1]} != net input {spec.n_in}")
    layers = dict(params.unpack())
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        a = a @ layers[f"W{i}"] + layers[f"b{i}"]
        if i < n_layers - 1:
            a = np.tanh(a)
    a = _apply_transform_np(a, spec.output_transform)
    return a[0] if single else a


def jet_forward(spec: MLPSpec, params: ParamVector, x: np.ndarray) -> Jet:
    """Value, input gradient and diagonal input Hessian at a single point.

    Propagated layer by layer with the analytic tanh rules; value matches
    mlp_eval bit-for-bit (same arithmetic order).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.n_in,):
        raise TapeError(f"point shape {x.shape} != ({spec.n_in},)")
    d = spec.n_in
    layers = dict(params.unpack())
    a = x[None, :]                      # (1, w)
    g = np.eye(d)[:, None, :]           # (d, 1, w) directional streams
    h = np.zeros((d, 1, d))
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        W, b = layers[f"W{i}"], layers[f"b{i}"]
        z = a @ W + b
        gz = g @ W
        hz = h @ W
        if i < n_layers - 1:
            t = np.tanh(z)
            dt = 1.0 - t * t
            ddt = -2.0 * t * dt
            a = t
            g = dt * gz
            h = ddt * gz * gz + dt * hz
        else:
            a, g, h = z, gz, hz
    if spec.output_transform == "softplus":
        sig = 1.0 / (1.0 + np.exp(-a))
        val = softplus_np(a)
        h = sig * (1.0 - sig) * g * g + sig * h
        g = sig * g
        a = val
    elif spec.output_transform == "square":
        h = 2.0 * g * g + 2.0 * a * h
        g = 2.0 * a * g
        a = a * a
    return Jet(value=a[0], grad=g[:, 0, :], diag_hess=h[:, 0, :])


def gamma_init(dim: int) -> dict[str, float]:
    """Constant-coefficient block: velocities at 1.0 and diffusion at 1.0
    through the softplus reparameterization (so D stays positive)."""
    block = {"Vx": 1.0, "Vy": 1.0}
    if dim == 3:
        block["Vz"] = 1.0
    block["rhoD"] = inv_softplus(1.0)
    return block


# ---------------------------------------------------------------------------
# tape-side evaluation (used by the residual/loss assembly)
# ---------------------------------------------------------------------------

@dataclass
class TapeStreams:
    """Batched network output and its input-derivative streams on a tape.

    value: (N, n_out); grad[k], hess[k]: derivative streams w.r.t. input
    coordinate k, broadcastable against (N, n_out).
    """

    value: Var
    grad: list[Var]
    hess: list[Var]


def mlp_tape_streams(tape: Tape, spec: MLPSpec, param_vars: list[Var],
                     x: np.ndarray, need_grad: bool = True,
                     need_hess: bool = True) -> TapeStreams:
    """Record the batched forward pass plus jet streams on `tape`.

    param_vars holds one leaf per layer array in layout order.  Derivative
    streams use the same recurrences as jet_forward, built from primitives so
    reverse mode reaches the parameters through them.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise TapeError(f"batch shape {x.shape} incompatible with input {spec.n_in}")
    need_grad = need_grad or need_hess
    d = spec.n_in
    layers = {}
    for (name, _), v in zip(spec.layer_shapes(), param_vars):
        layers[name] = v

    a = tape.const(x)
    g: list = []
    h: list = []
    if need_grad:
        g = [tape.const(np.eye(d)[k:k + 1, :]) for k in range(d)]  # (1, d)
        h = [None] * d
    n_layers = len(spec.widths) - 1
    one = tape.const(1.0)
    neg_two = tape.const(-2.0)
    for i in range(n_layers):
        W, b = layers[f"W{i}"], layers[f"b{i}"]
        z = tape.add(tape.matmul(a, W), b)
        gz = [tape.matmul(gk, W) for gk in g]
        hz = [None if hk is None else tape.matmul(hk, W) for hk in h]
        if i < n_layers - 1:
            t = tape.tanh(z)
            if need_grad:
                dt = one - tape.square(t)
                if need_hess:
                    ddt = tape.mul(neg_two, tape.mul(t, dt))
                g = [tape.mul(dt, gk) for gk in gz]
                if need_hess:
                    h_new = []
                    for gk, hk in zip(gz, hz):
                        term = tape.mul(ddt, tape.square(gk))
                        if hk is not None:
                            term = term + tape.mul(dt, hk)
                        h_new.append(term)
                    h = h_new
            a = t
        else:
            a, g, h = z, gz, hz
    if spec.output_transform == "softplus":
        # sigmoid via 0.5*(1 + tanh(x/2)) keeps to the primitive set
        half = tape.const(0.5)
        sig = tape.mul(half, one + tape.tanh(tape.mul(half, a)))
        val = tape.softplus(a)
        if need_hess:
            dsig = tape.mul(sig, one - sig)
            h = [tape.mul(dsig, tape.square(gk)) +
                 (tape.mul(sig, hk) if hk is not None else tape.const(0.0))
                 for gk, hk in zip(g, h)]
        if need_grad:
            g = [tape.mul(sig, gk) for gk in g]
        a = val
    elif spec.output_transform == "square":
        two = tape.const(2.0)
        raw = a
        if need_hess:
            h = [tape.mul(two, tape.square(gk)) +
                 (tape.mul(two, tape.mul(raw, hk)) if hk is not None else tape.const(0.0))
                 for gk, hk in zip(g, h)]
        if need_grad:
            g = [tape.mul(two, tape.mul(raw, gk)) for gk in g]
        a = tape.square(raw)
    # affine paths leave hess streams as None (identically zero)
    h = [tape.const(0.0) if hk is None else hk for hk in h]
    return TapeStreams(value=a, grad=g, hess=h)


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then raw little-endian float64
# ---------------------------------------------------------------------------

def save_checkpoint(path, specs: dict[str, MLPSpec | None],
                    params: ParamVector, extra: dict | None = None) -> None:
    import json

    header = {
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "networks": {
            k: {"widths": list(s.widths), "output_transform": s.output_transform}
            for k, s in specs.items() if s is not None
        },
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, MLPSpec], ParamVector, dict]:
    import json

    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    layout = [(name, tuple(shape)) for name, shape in header["layout"]]
    specs = {
        k: MLPSpec(widths=tuple(v["widths"]), output_transform=v["output_transform"])
        for k, v in header["networks"].items()
    }
    return specs, ParamVector(data=data, layout=layout), header.get("extra", {})


# ---------------------------------------------------------------------------
# bundle: the four networks plus optional constant-coefficient block
# ---------------------------------------------------------------------------

@dataclass
class NetworkBundle:
    """Networks for u and f plus either nets or scalar gamma for V and D.

    Exactly one of (v_spec, gamma velocities) and one of (d_spec, gamma
    diffusion) is active; `gamma` holds raw scalars with D reparameterized
    through softplus.
    """

    u_spec: MLPSpec
    f_spec: MLPSpec
    v_spec: MLPSpec | None = None
    d_spec: MLPSpec | None = None
    dim: int = 2
    params: ParamVector | None = None

    def __post_init__(self):
        if self.params is None:
            raise TapeError("bundle needs params; use NetworkBundle.create")

    @classmethod
    def create(cls, u_spec: MLPSpec, f_spec: MLPSpec,
               v_spec: MLPSpec | None, d_spec: MLPSpec | None,
               dim: int, seed: int) -> "NetworkBundle":
        arrays: list[tuple[str, np.ndarray]] = []

        def extend(prefix: str, spec: MLPSpec, sub: int):
            pv = init_mlp(spec, seed + sub)
            for name, arr in pv.unpack():
                arrays.append((f"{prefix}.{name}", arr.copy()))

        extend("u", u_spec, 0)
        extend("f", f_spec, 1)
        if v_spec is not None:
            extend("v", v_spec, 2)
            if dim == 3:
                # settling velocity stays a learnable scalar alongside the net
                arrays.append(("gamma.Vz", np.asarray(1.0)))
        else:
            gb = gamma_init(dim)
            for key in ("Vx", "Vy", "Vz"):
                if key in gb:
                    arrays.append((f"gamma.{key}", np.asarray(gb[key])))
        if d_spec is not None:
            extend("d", d_spec, 3)
        else:
            arrays.append(("gamma.rhoD", np.asarray(gamma_init(dim)["rhoD"])))
        params = ParamVector.pack(arrays)
        return cls(u_spec=u_spec, f_spec=f_spec, v_spec=v_spec, d_spec=d_spec,
                   dim=dim, params=params)

    def specs(self) -> dict[str, MLPSpec | None]:
        return {"u": self.u_spec, "f": self.f_spec,
                "v": self.v_spec, "d": self.d_spec}

    def segments(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        return [(n, a) for n, a in self.params.unpack()
                if n.startswith(prefix + ".")]

    def block_slices(self) -> dict[str, slice]:
        """Contiguous flat-vector slice per parameter block (u, f, v|gamma_v,
        d|gamma_d)."""
        slices = self.params.segment_slices()
        blocks: dict[str, list[slice]] = {}
        for name, sl in slices.items():
            prefix = name.split(".", 1)[0]
            key = prefix
            if prefix == "gamma":
                key = "gamma_d" if name.endswith("rhoD") else "gamma_v"
            blocks.setdefault(key, []).append(sl)
        out = {}
        for key, sls in blocks.items():
            start = min(s.start for s in sls)
            stop = max(s.stop for s in sls)
            out[key] = slice(start, stop)
        return out

    def gamma_values(self) -> dict[str, float]:
        vals = {}
        for name, arr in self.params.unpack():
            if name.startswith("gamma."):
                vals[name.split(".", 1)[1]] = float(arr)
        if "rhoD" in vals:
            vals["D"] = float(softplus_np(np.asarray(vals["rhoD"])))
        return vals

    def with_params(self, theta: np.ndarray) -> "NetworkBundle":
        pv = ParamVector(data=np.asarray(theta, dtype=np.float64).copy(),
                         layout=list(self.params.layout))
        return NetworkBundle(u_spec=self.u_spec, f_spec=self.f_spec,
                             v_spec=self.v_spec, d_spec=self.d_spec,
                             dim=self.dim, params=pv)

    def net_params(self, prefix: str) -> ParamVector:
        segs = self.segments(prefix)
        return ParamVector.pack([(n.split(".", 1)[1], a) for n, a in segs])
