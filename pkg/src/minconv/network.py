"""Forecasting model: 1x1 encoder, stacked cell layers with group-norm
residual blocks, 1x1 decoder.

Each layer computes y = GroupNorm(Cell(x)) + x; a single LayerNorm
(group norm with one group, i.e. statistics over all of C,H,W) follows
the encoder. The decoder predicts the next frame directly unless
``predict_delta`` asks for a residual target.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .cells import (
    CELL_KINDS,
    GATE_NAMES,
    CellSpec,
    cell_forward_sequence_with_state,
    cell_step,
    init_cell_params,
)
from .conv import conv2d as conv_op
from .conv import init_conv_kernel
from .tensor import (
    ConfigError,
    ContractError,
    NumericError,
    Tensor,
    _apply,
    constant,
    reshape,
    stack_time,
    tanh,
    time_index,
)

CHECKPOINT_MAGIC = b"MCWT"
CHECKPOINT_VERSION = 1

# hidden-channel presets chosen so every cell kind lands near the same
# parameter budget (about 175k for the 4-layer configuration)
NS_CHANNELS = {"convgru": 28, "convlstm": 25, "minconvgru": 49,
               "minconvlstm": 40, "minconvexplstm": 40}
GEO_CHANNELS = {"convgru": 14, "convlstm": 12, "minconvgru": 24,
                "minconvlstm": 20, "minconvexplstm": 20}


class CheckpointError(ValueError):
    """Checkpoint file violates the MCWT format; .code names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ModelSpec:
    cell: str
    channels: int
    layers: int
    in_channels: int = 1
    out_channels: int = 1
    groups: int = 4
    padding: str = "periodic"
    backend: str = "blelloch"
    interlayer_tanh: bool = False
    predict_delta: bool = False

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.cell!r}")
        if self.channels <= 0 or self.layers <= 0:
            raise ConfigError("channels and layers must be positive")
        if self.predict_delta and self.in_channels != self.out_channels:
            raise ConfigError("predict_delta needs matching in/out channels")

    @property
    def effective_groups(self) -> int:
        # largest divisor of the channel count not exceeding the request
        for g in range(min(self.groups, self.channels), 0, -1):
            if self.channels % g == 0:
                return g
        return 1

    def cell_spec(self) -> CellSpec:
        return CellSpec(self.cell, self.channels, in_channels=self.channels,
                        padding=self.padding)


def ns_preset(cell: str, **overrides) -> ModelSpec:
    return ModelSpec(cell=cell, channels=NS_CHANNELS[cell], layers=4, **overrides)


def geo_preset(cell: str, **overrides) -> ModelSpec:
    overrides.setdefault("padding", "zero")
    return ModelSpec(cell=cell, channels=GEO_CHANNELS[cell], layers=3, **overrides)


def param_names(spec: ModelSpec) -> list[str]:
    """Parameter declaration order; checkpoints serialize in this order."""
    names = ["enc.w", "enc.b", "enc_norm.gamma", "enc_norm.beta"]
    for i in range(spec.layers):
        for gate in GATE_NAMES[spec.cell]:
            names += [f"layer{i}.{gate}.w", f"layer{i}.{gate}.b"]
        names += [f"layer{i}.norm.gamma", f"layer{i}.norm.beta"]
    names += ["dec.w", "dec.b"]
    return names


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    def bind(self, tape=None) -> dict[str, Tensor]:
        """Wrap parameters as tape leaves (or constants when tape is None)."""
        if tape is None:
            return {k: constant(v) for k, v in self.params.items()}
        return {k: tape.param(v) for k, v in self.params.items()}

    def forward_tf(self, frames, tape=None, backend=None, workers=None):
        params = self.bind(tape)
        preds, _ = model_forward_tf(self.spec, params, frames,
                                    backend=backend, workers=workers)
        return preds

    def rollout(self, context, steps, backend=None, workers=None):
        return model_rollout(self.spec, self.bind(None), context, steps,
                             backend=backend, workers=workers)

    def predict_sequence(self, frames, tf_steps, horizon=None,
                         backend=None, workers=None) -> np.ndarray:
        return predict_sequence(self.spec, self.bind(None), frames, tf_steps,
                                horizon, backend=backend, workers=workers)


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Deterministic init from seed; same seed gives bit-identical params."""
    rng = np.random.default_rng(seed)
    c, cin, cout = spec.channels, spec.in_channels, spec.out_channels
    params: dict[str, np.ndarray] = {}
    enc = init_conv_kernel(rng, c, cin, 1, spec.padding, dtype)
    params["enc.w"], params["enc.b"] = enc.weights, enc.bias
    params["enc_norm.gamma"] = np.ones(c, dtype=dtype)
    params["enc_norm.beta"] = np.zeros(c, dtype=dtype)
    for i in range(spec.layers):
        cell_params = init_cell_params(spec.cell_spec(), rng, dtype)
        for k, v in cell_params.items():
            params[f"layer{i}.{k}"] = v
        params[f"layer{i}.norm.gamma"] = np.ones(c, dtype=dtype)
        params[f"layer{i}.norm.beta"] = np.zeros(c, dtype=dtype)
    dec = init_conv_kernel(rng, cout, c, 1, spec.padding, dtype)
    params["dec.w"], params["dec.b"] = dec.weights, dec.bias
    assert list(params) == param_names(spec)
    return Model(spec, params)


def count_params(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter total for a built model."""
    c, k = spec.channels, 3
    gate_in = 2 * c if spec.cell in ("convlstm", "convgru") else c
    n_convs = len(GATE_NAMES[spec.cell])
    enc = c * spec.in_channels + c + 2 * c
    layer = n_convs * (k * k * gate_in * c + c) + 2 * c
    dec = spec.out_channels * c + spec.out_channels
    return enc + spec.layers * layer + dec


def group_norm_raw(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   groups: int, eps: float = 1e-5):
    b, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    xg = x.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gshape = (1, c) + (1,) * (x.ndim - 2)
    out = gamma.reshape(gshape) * xhat + beta.reshape(gshape)
    return out, xhat, inv


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Per-(batch, group) standardization over (C/G, H, W), then affine."""
    out, xhat, inv = group_norm_raw(x.data, gamma.data, beta.data, groups, eps)
    b, c = x.data.shape[0], x.data.shape[1]
    gshape = (1, c) + (1,) * (x.data.ndim - 2)
    gdata = gamma.data

    def vjp(g):
        dbeta = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        dgamma = (g * xhat).sum(axis=(0,) + tuple(range(2, g.ndim)))
        dxh = (g * gdata.reshape(gshape)).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        m1 = dxh.mean(axis=2, keepdims=True)
        m2 = (dxh * xh).mean(axis=2, keepdims=True)
        dx = ((dxh - m1 - xh * m2) * inv).reshape(g.shape)
        return dx, dgamma, dbeta

    return _apply("group_norm", out, (x, gamma, beta), vjp)


def _fold(x: Tensor):
    shp = x.data.shape
    return reshape(x, (shp[0] * shp[1],) + shp[2:]), (shp[0], shp[1])


def _unfold(x: Tensor, bt):
    return reshape(x, bt + x.data.shape[1:])


def _layer_params(params: dict, i: int) -> dict:
    prefix = f"layer{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _encode_folded(spec: ModelSpec, params: dict, x: Tensor) -> Tensor:
    y = conv_op(x, params["enc.w"], params["enc.b"], spec.padding)
    return group_norm(y, params["enc_norm.gamma"], params["enc_norm.beta"], groups=1)


def _decode_folded(spec: ModelSpec, params: dict, x: Tensor) -> Tensor:
    return conv_op(x, params["dec.w"], params["dec.b"], spec.padding)


def _residual_block(spec: ModelSpec, lp: dict, x: Tensor, h: Tensor) -> Tensor:
    y = group_norm(h, lp["norm.gamma"], lp["norm.beta"], spec.effective_groups)
    if spec.interlayer_tanh:
        y = tanh(y)
    return x + y


def _check_layer(t: Tensor, i: int) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite activations after layer {i}")
    return t


def model_forward_tf(spec: ModelSpec, params: dict, frames, backend=None,
                     workers=None):
    """Teacher-forced pass over (B,T,Cin,H,W); prediction t targets frame t+1.

    Returns (predictions (B,T,Cout,H,W), per-layer final states).
    """
    x = frames if isinstance(frames, Tensor) else constant(frames)
    if x.data.ndim != 5:
        raise ContractError(f"frames must be (B,T,C,H,W), got {x.data.shape}")
    backend = backend or spec.backend
    folded, bt = _fold(x)
    y = _unfold(_encode_folded(spec, params, folded), bt)
    cspec = spec.cell_spec()
    states = []
    for i in range(spec.layers):
        lp = _layer_params(params, i)
        lb = "sequential" if spec.cell in ("convlstm", "convgru") else backend
        h_seq, st = cell_forward_sequence_with_state(
            cspec, lp, y, backend=lb, workers=workers)
        hf, _ = _fold(h_seq)
        yf, _ = _fold(y)
        y = _check_layer(_unfold(_residual_block(spec, lp, yf, hf), bt), i)
        states.append(st)
    preds = _unfold(_decode_folded(spec, params, _fold(y)[0]), bt)
    if spec.predict_delta:
        preds = preds + x
    return preds, states


def model_step(spec: ModelSpec, params: dict, x_t: Tensor, states):
    """One closed-loop step from (B,Cin,H,W); returns (pred, new states)."""
    y = _encode_folded(spec, params, x_t)
    cspec = spec.cell_spec()
    new_states = []
    for i in range(spec.layers):
        lp = _layer_params(params, i)
        h, st = cell_step(cspec, lp, y, states[i])
        y = _check_layer(_residual_block(spec, lp, y, h), i)
        new_states.append(st)
    pred = _decode_folded(spec, params, y)
    if spec.predict_delta:
        pred = pred + x_t
    return pred, new_states


def model_rollout(spec: ModelSpec, params: dict, context, steps: int,
                  backend=None, workers=None) -> Tensor:
    """Warm-start on the context, then unroll ``steps`` frames closed loop.

    The first rollout frame is the prediction that follows the last
    context frame; afterwards each prediction feeds back as input.
    """
    if steps <= 0:
        raise ContractError("rollout steps must be positive")
    tf_preds, states = model_forward_tf(spec, params, context,
                                        backend=backend, workers=workers)
    x = time_index(tf_preds, tf_preds.data.shape[1] - 1)
    outs = []
    for k in range(steps):
        outs.append(x)
        if k + 1 < steps:
            x, states = model_step(spec, params, x, states)
    return stack_time(outs)


def predict_sequence(spec: ModelSpec, params: dict, frames: np.ndarray,
                     tf_steps: int, horizon: int | None = None,
                     backend=None, workers=None) -> np.ndarray:
    """Predictions of frames 1..horizon given ground truth for the first
    ``tf_steps`` inputs and fed-back predictions afterwards."""
    frames = np.asarray(frames)
    t_total = frames.shape[1]
    if horizon is None:
        horizon = t_total - 1
    if horizon > t_total - 1:
        raise ConfigError(
            f"horizon {horizon} exceeds the {t_total - 1} predictable frames")
    if not 1 <= tf_steps <= horizon:
        raise ConfigError("need 1 <= tf_steps <= horizon")
    tf_preds, states = model_forward_tf(spec, params, frames[:, :tf_steps],
                                        backend=backend, workers=workers)
    preds = [tf_preds.data]
    if horizon > tf_steps:
        x = time_index(tf_preds, tf_steps - 1)
        cl = []
        for _ in range(horizon - tf_steps):
            x, states = model_step(spec, params, x, states)
            cl.append(x.data)
        preds.append(np.stack(cl, axis=1))
    return np.concatenate(preds, axis=1)


def save_checkpoint(model: Model, path) -> None:
    """Versioned binary: MCWT magic, u32 version, spec record, f32 params."""
    spec_blob = json.dumps(asdict(model.spec)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec_blob)))
        fh.write(spec_blob)
        for name in param_names(model.spec):
            fh.write(np.ascontiguousarray(
                model.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad_magic", f"not a checkpoint file: magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError("truncated", "checkpoint shorter than its header")
    version, spec_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("bad_version", f"unsupported checkpoint version {version}")
    try:
        spec = ModelSpec(**json.loads(blob[12:12 + spec_len].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError("bad_spec", f"unreadable spec record: {exc}") from exc
    rng_model = build_model(spec, seed=0)  # shapes only
    params = {}
    off = 12 + spec_len
    for name in param_names(spec):
        shape = rng_model.params[name].shape
        nbytes = int(np.prod(shape)) * 4
        chunk = blob[off:off + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError("truncated", f"payload ends inside {name}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing_bytes", "checkpoint has unexpected trailing bytes")
    return Model(spec, params)
