"""Dense float tensors and a reverse-mode differentiation tape.

Tensors wrap contiguous numpy arrays (f32 or f64, order <= 5) and are
immutable values. A Tape records one forward pass over a closed operation
vocabulary: elementwise maps, binary zips, reductions, a few structural
ops, and the convolution / scan / normalization ops registered by their
own modules. ``Tape.backward`` replays the adjoint; it is a pure function
of the tape, so repeated calls give bit-identical gradients.
"""

from __future__ import annotations

import numpy as np

MAX_ORDER = 5

UNARY_OPS = ("sigmoid", "tanh", "softplus", "exp", "log", "negate")
BINARY_OPS = ("add", "sub", "mul", "div")
REDUCE_OPS = ("sum", "mean", "max")


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DomainError(ValueError):
    """An element lies outside an op's domain (e.g. log of x <= 0)."""


class ContractError(ValueError):
    """An op was called in a way its contract forbids."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finiteness is required."""


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim > MAX_ORDER:
        raise ShapeError(f"tensor order {arr.ndim} exceeds maximum {MAX_ORDER}")
    if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Immutable dense float array, optionally tracked on a Tape."""

    __slots__ = ("data", "tape", "node", "nonfinite")

    def __init__(self, data, dtype=None, tape=None, node=-1, nonfinite=False):
        self.data = _as_float_array(data, dtype)
        self.tape = tape
        self.node = node
        self.nonfinite = nonfinite

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return zip_binary(self, other, "add")

    def __sub__(self, other):
        return zip_binary(self, other, "sub")

    def __mul__(self, other):
        return zip_binary(self, other, "mul")

    def __truediv__(self, other):
        return zip_binary(self, other, "div")

    def __neg__(self):
        return map_unary(self, "negate")


def constant(data, dtype=None) -> Tensor:
    """Wrap data as an untracked tensor."""
    return Tensor(data, dtype=dtype)


class Tape:
    """Append-only record of one forward pass.

    Nodes are created in topological order by construction; backward
    visits them exactly once in reverse creation order. Leaves are the
    parameter nodes registered through :meth:`param`.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list = []
        self._leaf_data: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._ops)

    def param(self, data, dtype=None) -> Tensor:
        """Register a parameter leaf and return its tracked tensor."""
        t = Tensor(data, dtype=dtype, tape=self, node=len(self._ops))
        self._ops.append("param")
        self._inputs.append(())
        self._vjps.append(None)
        self._leaf_data[t.node] = t.data
        return t

    @property
    def leaf_ids(self) -> tuple[int, ...]:
        return tuple(self._leaf_data)

    def add_node(self, op: str, input_ids: tuple[int, ...], vjp) -> int:
        nid = len(self._ops)
        self._ops.append(op)
        self._inputs.append(input_ids)
        self._vjps.append(vjp)
        return nid

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar loss for every leaf.

        Leaves unreachable from the loss get zero gradients. The pass does
        not mutate the tape, so it can be rerun.
        """
        if loss.tape is not self or loss.node < 0:
            raise ContractError("loss tensor was not produced on this tape")
        if loss.data.shape != ():
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._ops)
        grads[loss.node] = np.ones((), dtype=loss.data.dtype)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            vjp = self._vjps[nid]
            if vjp is None:
                continue
            for in_id, gi in zip(self._inputs[nid], vjp(g)):
                if gi is None:
                    continue
                if grads[in_id] is None:
                    grads[in_id] = gi
                else:
                    grads[in_id] = grads[in_id] + gi
        out = {}
        for leaf_id, data in self._leaf_data.items():
            g = grads[leaf_id]
            if g is None:
                g = np.zeros_like(data)
            out[leaf_id] = Tensor(np.broadcast_to(g, data.shape).astype(data.dtype, copy=False))
        return out


def _apply(op: str, out_data: np.ndarray, inputs, vjp_all, nonfinite=False) -> Tensor:
    """Build the result tensor, recording a node when any input is tracked.

    ``vjp_all(g)`` must return one gradient per entry of ``inputs`` (None
    allowed); grads for untracked inputs are dropped.
    """
    tracked = [t for t in inputs if t.tape is not None]
    if not tracked:
        return Tensor(out_data, nonfinite=nonfinite)
    tape = tracked[0].tape
    for t in tracked[1:]:
        if t.tape is not tape:
            raise ContractError("operands belong to different tapes")
    mask = [t.tape is not None for t in inputs]

    def vjp(g):
        full = vjp_all(g)
        return [fi for fi, m in zip(full, mask) if m]

    node = tape.add_node(op, tuple(t.node for t in tracked), vjp)
    return Tensor(out_data, tape=tape, node=node, nonfinite=nonfinite)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # overflow-safe form: max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def map_unary(t: Tensor, f: str) -> Tensor:
    """Elementwise nonlinearity; shape preserved, recorded when tracked."""
    x = t.data
    if f == "sigmoid":
        out = _sigmoid(x)
        vjp = lambda g: (g * out * (1.0 - out),)
    elif f == "tanh":
        out = np.tanh(x)
        vjp = lambda g: (g * (1.0 - out * out),)
    elif f == "softplus":
        out = _softplus(x)
        vjp = lambda g: (g * _sigmoid(x),)
    elif f == "exp":
        out = np.exp(x)
        vjp = lambda g: (g * out,)
    elif f == "log":
        bad = x <= 0
        if bad.any():
            idx = int(np.flatnonzero(bad.ravel())[0])
            raise DomainError(f"log of non-positive element at flat index {idx}")
        out = np.log(x)
        vjp = lambda g: (g / x,)
    elif f == "negate":
        out = -x
        vjp = lambda g: (-g,)
    else:
        raise ContractError(f"unknown unary op {f!r}; expected one of {UNARY_OPS}")
    return _apply(f, out, (t,), vjp)


def sigmoid(t):
    return map_unary(t, "sigmoid")


def tanh(t):
    return map_unary(t, "tanh")


def softplus(t):
    return map_unary(t, "softplus")


def exp(t):
    return map_unary(t, "exp")


def log(t):
    return map_unary(t, "log")


def _check_zip_shapes(xs, ys):
    if xs == ys:
        return
    if len(xs) != len(ys) or any(sy != sx and sy != 1 for sx, sy in zip(xs, ys)):
        raise ShapeError(
            f"second operand {ys} is not broadcastable to {xs} by singleton axes"
        )


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def zip_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise binary op; b may broadcast to a by singleton axes."""
    x, y = a.data, b.data
    _check_zip_shapes(x.shape, y.shape)
    nonfinite = False
    if op == "add":
        out = x + y
        vjp = lambda g: (g, _reduce_to(g, y.shape))
    elif op == "sub":
        out = x - y
        vjp = lambda g: (g, _reduce_to(-g, y.shape))
    elif op == "mul":
        out = x * y
        vjp = lambda g: (g * y, _reduce_to(g * x, y.shape))
    elif op == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y
        nonfinite = bool(~np.isfinite(out).all())

        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return g / y, _reduce_to(-g * x / (y * y), y.shape)

    else:
        raise ContractError(f"unknown binary op {op!r}; expected one of {BINARY_OPS}")
    return _apply(op, out, (a, b), vjp, nonfinite=nonfinite)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(set(int(ax) % ndim if -ndim <= int(ax) < ndim else int(ax) for ax in axes)))
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for order-{ndim} tensor")
    return axes


def reduce(t: Tensor, axes, op: str) -> Tensor:
    """Collapse axes with sum/mean/max; empty axis set returns t unchanged."""
    if axes is not None and not isinstance(axes, int) and len(tuple(axes)) == 0:
        return t
    axes = _normalize_axes(axes, t.data.ndim)
    x = t.data
    kept = tuple(s if i not in axes else 1 for i, s in enumerate(x.shape))
    if op == "sum":
        out = x.sum(axis=axes)
        vjp = lambda g: (np.broadcast_to(g.reshape(kept), x.shape),)
    elif op == "mean":
        count = 1
        for ax in axes:
            count *= x.shape[ax]
        out = x.mean(axis=axes)
        vjp = lambda g: (np.broadcast_to(g.reshape(kept), x.shape) / count,)
    elif op == "max":
        out = x.max(axis=axes)

        def vjp(g):
            mask = (x == out.reshape(kept)).astype(x.dtype)
            mask /= mask.sum(axis=axes, keepdims=True)
            return (g.reshape(kept) * mask,)

    else:
        raise ContractError(f"unknown reduce op {op!r}; expected one of {REDUCE_OPS}")
    return _apply(op, out, (t,), vjp)


def reduce_sum(t, axes=None):
    return reduce(t, axes, "sum")


def reduce_mean(t, axes=None):
    return reduce(t, axes, "mean")


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _apply("scale", t.data * c, (t,), lambda g: (g * c,))


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.data.size:
        raise ShapeError(f"cannot reshape {t.data.shape} to {shape}")
    old = t.data.shape
    return _apply("reshape", t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def concat_channel(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1 (the channel axis of (B,C,H,W) tensors)."""
    x, y = a.data, b.data
    if x.ndim != y.ndim or x.ndim < 2:
        raise ShapeError(f"cannot channel-concat shapes {x.shape} and {y.shape}")
    if x.shape[:1] + x.shape[2:] != y.shape[:1] + y.shape[2:]:
        raise ShapeError(f"non-channel extents differ: {x.shape} vs {y.shape}")
    cx = x.shape[1]
    out = np.concatenate([x, y], axis=1)
    return _apply(
        "concat_c", out, (a, b), lambda g: (g[:, :cx], g[:, cx:])
    )


def time_index(t: Tensor, idx: int) -> Tensor:
    """Select one step from the time axis: (B,T,...) -> (B,...)."""
    x = t.data
    if x.ndim < 2:
        raise ShapeError("time_index needs a (B,T,...) tensor")
    idx = int(idx)
    if not 0 <= idx < x.shape[1]:
        raise ShapeError(f"time index {idx} out of range for T={x.shape[1]}")

    def vjp(g):
        full = np.zeros_like(x)
        full[:, idx] = g
        return (full,)

    return _apply("time_index", np.ascontiguousarray(x[:, idx]), (t,), vjp)


def stack_time(tensors) -> Tensor:
    """Stack (B,...) tensors into (B,T,...) along a new time axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack_time needs at least one tensor")
    out = np.stack([t.data for t in tensors], axis=1)

    def vjp(g):
        return tuple(g[:, i] for i in range(len(tensors)))

    return _apply("stack_time", out, tuple(tensors), vjp)


def finite_diff_grad(f, params: dict[str, np.ndarray], eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named parameters.

    ``f`` takes the params dict and returns a float; it must be
    deterministic. This is the verification oracle for Tape.backward and
    stays independent of it.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    grads = {}
    work = {k: v.copy() for k, v in params.items()}
    for name, p in work.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(work)
            flat[i] = orig - eps
            lo = f(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads
