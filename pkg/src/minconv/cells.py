"""Recurrent cell types over spatial grids.

Sequential references (ConvLSTM, ConvGRU) update gates from [x, h] one
step at a time. The minimal cells (MinConvGRU, MinConvLSTM,
MinConvExpLSTM) gate on the input alone, so the whole sequence of decay /
input coefficients is computed with one time-folded batched convolution
and handed to the linear scan.

Normalized gate pairs for MinConvLSTM are produced in log space:

    log(phi_hat) = -softplus(softplus(-k_phi) - softplus(-k_iota))
    log(iota_hat) = -softplus(softplus(-k_iota) - softplus(-k_phi))

so that exp(log phi_hat) + exp(log iota_hat) = 1 without divisions.
MinConvExpLSTM gates with exponentials instead of sigmoids, which
collapses the normalized pair to a single sigmoid of a difference:
phi_hat = sigmoid(k_phi - k_iota), iota_hat = 1 - phi_hat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import init_conv_kernel
from .conv import conv2d as conv_op
from .scan import linear_scan
from .tensor import (
    ContractError,
    NumericError,
    ShapeError,
    Tensor,
    _apply,
    _sigmoid,
    _softplus,
    concat_channel,
    constant,
    reshape,
    sigmoid,
    stack_time,
    tanh,
    time_index,
    zip_binary,
)

CELL_KINDS = ("convlstm", "convgru", "minconvgru", "minconvlstm", "minconvexplstm")
REFERENCE_KINDS = ("convlstm", "convgru")
MINIMAL_KINDS = ("minconvgru", "minconvlstm", "minconvexplstm")

GATE_NAMES = {
    "convlstm": ("phi", "iota", "cand", "omega"),
    "convgru": ("z", "r", "cand"),
    "minconvgru": ("z", "cand"),
    "minconvlstm": ("phi", "iota", "cand"),
    "minconvexplstm": ("phi", "iota", "cand"),
}


@dataclass(frozen=True)
class CellSpec:
    kind: str
    channels: int
    in_channels: int | None = None
    kernel: int = 3
    padding: str = "periodic"

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ContractError(f"unknown cell kind {self.kind!r}")
        if self.channels <= 0:
            raise ContractError("channels must be positive")
        if self.in_channels is None:
            object.__setattr__(self, "in_channels", self.channels)

    @property
    def gate_in_channels(self) -> int:
        # reference cells convolve [x, h]; minimal cells convolve x alone
        if self.kind in REFERENCE_KINDS:
            return self.in_channels + self.channels
        return self.in_channels


def init_cell_params(spec: CellSpec, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters, keyed '<gate>.w' / '<gate>.b' in declaration order."""
    params = {}
    for gate in GATE_NAMES[spec.kind]:
        k = init_conv_kernel(rng, spec.channels, spec.gate_in_channels,
                             spec.kernel, spec.padding, dtype)
        params[f"{gate}.w"] = k.weights
        params[f"{gate}.b"] = k.bias
    return params


def audit_cell_params(spec: CellSpec, params: dict) -> None:
    """Check the parameter set against the per-kind conv-count table."""
    gates = GATE_NAMES[spec.kind]
    expect = {f"{g}.{s}" for g in gates for s in ("w", "b")}
    got = set(params)
    if got != expect:
        raise ShapeError(f"expected params {sorted(expect)}, got {sorted(got)}")
    wshape = (spec.channels, spec.gate_in_channels, spec.kernel, spec.kernel)
    for g in gates:
        w = params[f"{g}.w"]
        b = params[f"{g}.b"]
        if tuple(np.shape(w)) != wshape:
            raise ShapeError(f"{g}.w has shape {np.shape(w)}, expected {wshape}")
        if tuple(np.shape(b)) != (spec.channels,):
            raise ShapeError(f"{g}.b has shape {np.shape(b)}, expected ({spec.channels},)")


def _data(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _check_activation(t: Tensor, name: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite activation in {name}")
    return t


def _gate_conv(x: Tensor, params: dict, gate: str, padding: str) -> Tensor:
    return conv_op(x, params[f"{gate}.w"], params[f"{gate}.b"], padding)


def _one_minus(t: Tensor) -> Tensor:
    return zip_binary(constant(np.ones_like(t.data)), t, "sub")


def convlstm_step(x_t: Tensor, h_prev: Tensor, s_prev: Tensor, params: dict,
                  padding: str = "periodic") -> tuple[Tensor, Tensor]:
    """One ConvLSTM update: gates from [x, h], cell state EMA, gated output."""
    xh = concat_channel(x_t, h_prev)
    phi = _check_activation(sigmoid(_gate_conv(xh, params, "phi", padding)), "phi")
    iota = _check_activation(sigmoid(_gate_conv(xh, params, "iota", padding)), "iota")
    cand = _check_activation(tanh(_gate_conv(xh, params, "cand", padding)), "cand")
    omega = _check_activation(sigmoid(_gate_conv(xh, params, "omega", padding)), "omega")
    s_t = phi * s_prev + iota * cand
    h_t = omega * tanh(s_t)
    return h_t, s_t


def convgru_step(x_t: Tensor, h_prev: Tensor, params: dict,
                 padding: str = "periodic") -> Tensor:
    """One ConvGRU update with reset-gated candidate and EMA blend."""
    xh = concat_channel(x_t, h_prev)
    z = _check_activation(sigmoid(_gate_conv(xh, params, "z", padding)), "z")
    r = _check_activation(sigmoid(_gate_conv(xh, params, "r", padding)), "r")
    xrh = concat_channel(x_t, r * h_prev)
    cand = _check_activation(tanh(_gate_conv(xrh, params, "cand", padding)), "cand")
    return _one_minus(z) * h_prev + z * cand


def _softplus_sigmoid(x: np.ndarray):
    """softplus(x) and sigmoid(x) from one shared exp(-|x|)."""
    e = np.exp(-np.abs(x))
    sp = np.maximum(x, 0.0) + np.log1p(e)
    sig = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return sp, sig


def _log_gates_f64(u: np.ndarray, v: np.ndarray):
    """Normalized log-gate pair and the sigmoid factors its adjoint needs.

    Evaluated in f64 regardless of storage dtype: the softplus chain loses
    about 1e-6 relative in native f32, which would eat the whole gate
    tolerance budget. softplus(-d) is folded to softplus(d) - d.
    """
    u64 = u.astype(np.float64, copy=False)
    v64 = v.astype(np.float64, copy=False)
    spu, snu = _softplus_sigmoid(-u64)
    spv, snv = _softplus_sigmoid(-v64)
    d = spu - spv
    spd, sd = _softplus_sigmoid(d)
    return -spd, d - spd, sd, 1.0 - sd, snu, snv


def _log_gate_nodes(u: Tensor, v: Tensor, linear: bool) -> tuple[Tensor, Tensor]:
    """Record the gate pair (log or linear) as two tape nodes."""
    dtype = u.data.dtype
    tracked = u.tape is not None or v.tape is not None
    log_phi, log_iota, sd, snd, snu, snv = _log_gates_f64(u.data, v.data)
    if linear:
        phi = np.exp(log_phi)
        iota = np.exp(log_iota)
        out_a, out_b = phi.astype(dtype), iota.astype(dtype)
        name = "gate_pair"
        if tracked:
            # d phi/du = phi*sig(d)*sig(-u), etc.; iota mirrors with flipped sign
            fu = (phi * sd * snu).astype(dtype)
            fv = (phi * sd * snv).astype(dtype)
            gu = (iota * snd * snu).astype(dtype)
            gv = (iota * snd * snv).astype(dtype)
    else:
        out_a, out_b = log_phi.astype(dtype), log_iota.astype(dtype)
        name = "log_gate_pair"
        if tracked:
            fu = (sd * snu).astype(dtype)
            fv = (sd * snv).astype(dtype)
            gu = (snd * snu).astype(dtype)
            gv = (snd * snv).astype(dtype)
    if not tracked:
        return Tensor(out_a), Tensor(out_b)
    a = _apply(name, out_a, (u, v), lambda g: (g * fu, -g * fv))
    b = _apply(name, out_b, (u, v), lambda g: (-g * gu, g * gv))
    return a, b


def _fold_time(x_seq: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    b, t = x_seq.data.shape[:2]
    rest = x_seq.data.shape[2:]
    return reshape(x_seq, (b * t,) + rest), (b, t)


def _unfold_time(x: Tensor, bt: tuple[int, int], channels: int) -> Tensor:
    b, t = bt
    rest = x.data.shape[2:]
    return reshape(x, (b, t, channels) + rest)


def _batched_gate(x_seq: Tensor, params: dict, gate: str, padding: str,
                  channels: int) -> Tensor:
    folded, bt = _fold_time(x_seq)
    return _unfold_time(_gate_conv(folded, params, gate, padding), bt, channels)


def minconvgru_coeffs(x_seq: Tensor, params: dict, padding: str = "periodic",
                      channels: int | None = None) -> tuple[Tensor, Tensor]:
    """Per-step (decay, input) pair: a = 1 - z, b = z * cand, all steps at once."""
    c = channels if channels is not None else _data(params["z.w"]).shape[0]
    z = _check_activation(sigmoid(_batched_gate(x_seq, params, "z", padding, c)), "z")
    cand = _check_activation(_batched_gate(x_seq, params, "cand", padding, c), "cand")
    return _one_minus(z), z * cand


def minconvlstm_log_gates(x_seq: Tensor, params: dict, padding: str = "periodic",
                          channels: int | None = None) -> tuple[Tensor, Tensor]:
    """Log-normalized forget/input gates, time-independent per step."""
    c = channels if channels is not None else _data(params["phi.w"]).shape[0]
    k_phi = _check_activation(_batched_gate(x_seq, params, "phi", padding, c), "phi")
    k_iota = _check_activation(_batched_gate(x_seq, params, "iota", padding, c), "iota")
    return _log_gate_nodes(k_phi, k_iota, linear=False)


def minconvlstm_coeffs(x_seq: Tensor, params: dict, padding: str = "periodic",
                       channels: int | None = None) -> tuple[Tensor, Tensor]:
    """a = phi_hat (exp of the log gate), b = iota_hat * cand."""
    c = channels if channels is not None else _data(params["phi.w"]).shape[0]
    k_phi = _check_activation(_batched_gate(x_seq, params, "phi", padding, c), "phi")
    k_iota = _check_activation(_batched_gate(x_seq, params, "iota", padding, c), "iota")
    phi_hat, iota_hat = _log_gate_nodes(k_phi, k_iota, linear=True)
    cand = _check_activation(_batched_gate(x_seq, params, "cand", padding, c), "cand")
    return phi_hat, iota_hat * cand


def minconvexplstm_coeffs(x_seq: Tensor, params: dict, padding: str = "periodic",
                          channels: int | None = None) -> tuple[Tensor, Tensor]:
    """Exponential gating: one sigmoid of the pre-activation difference."""
    c = channels if channels is not None else _data(params["phi.w"]).shape[0]
    k_phi = _check_activation(_batched_gate(x_seq, params, "phi", padding, c), "phi")
    k_iota = _check_activation(_batched_gate(x_seq, params, "iota", padding, c), "iota")
    phi_hat = sigmoid(zip_binary(k_phi, k_iota, "sub"))
    iota_hat = _one_minus(phi_hat)
    cand = _check_activation(_batched_gate(x_seq, params, "cand", padding, c), "cand")
    return phi_hat, iota_hat * cand


_COEFF_FNS = {
    "minconvgru": minconvgru_coeffs,
    "minconvlstm": minconvlstm_coeffs,
    "minconvexplstm": minconvexplstm_coeffs,
}


def cell_coeffs(spec: CellSpec, params: dict, x_seq: Tensor) -> tuple[Tensor, Tensor]:
    if spec.kind not in MINIMAL_KINDS:
        raise ContractError(f"{spec.kind} has no scan coefficients")
    return _COEFF_FNS[spec.kind](x_seq, params, spec.padding, spec.channels)


def init_state(spec: CellSpec, batch: int, h: int, w: int, dtype=np.float32):
    """Zero initial state: (h,) for single-state cells, (h, s) for ConvLSTM."""
    z = constant(np.zeros((batch, spec.channels, h, w), dtype=dtype))
    if spec.kind == "convlstm":
        return (z, z)
    return (z,)


def cell_step(spec: CellSpec, params: dict, x_t: Tensor, state):
    """Advance one step; returns (h_t, new_state)."""
    if spec.kind == "convlstm":
        h, s = convlstm_step(x_t, state[0], state[1], params, spec.padding)
        return h, (h, s)
    if spec.kind == "convgru":
        h = convgru_step(x_t, state[0], params, spec.padding)
        return h, (h,)
    x_seq = reshape(x_t, (x_t.data.shape[0], 1) + x_t.data.shape[1:])
    a, b = cell_coeffs(spec, params, x_seq)
    a1 = time_index(a, 0)
    b1 = time_index(b, 0)
    h = a1 * state[0] + b1
    return h, (h,)


def cell_forward_sequence(spec: CellSpec, params: dict, x_seq: Tensor,
                          h0: Tensor | None = None, backend: str = "blelloch",
                          workers: int | None = None) -> Tensor:
    h_seq, _ = cell_forward_sequence_with_state(
        spec, params, x_seq, h0=h0, backend=backend, workers=workers)
    return h_seq


def cell_forward_sequence_with_state(spec: CellSpec, params: dict, x_seq: Tensor,
                                     h0: Tensor | None = None,
                                     backend: str = "blelloch",
                                     workers: int | None = None):
    """Run a whole sequence; returns (h_seq, final state).

    Minimal cells dispatch coefficient computation plus a scan backend;
    reference cells only support the sequential step loop.
    """
    bsz, t = x_seq.data.shape[:2]
    hgt, wid = x_seq.data.shape[3], x_seq.data.shape[4]
    if spec.kind in REFERENCE_KINDS:
        if backend != "sequential":
            raise ContractError(
                f"{spec.kind} is a sequential reference cell; backend {backend!r} unavailable")
        state = init_state(spec, bsz, hgt, wid, x_seq.data.dtype)
        if h0 is not None:
            state = (h0,) + state[1:]
        hs = []
        for step in range(t):
            h, state = cell_step(spec, params, time_index(x_seq, step), state)
            hs.append(h)
        return stack_time(hs), state
    a, b = cell_coeffs(spec, params, x_seq)
    if h0 is None:
        h0 = constant(np.zeros((bsz, spec.channels, hgt, wid), dtype=x_seq.data.dtype))
    h_seq = linear_scan(a, b, h0, backend=backend, workers=workers)
    return h_seq, (time_index(h_seq, t - 1),)
