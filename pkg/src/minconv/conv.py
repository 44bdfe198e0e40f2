"""2-D convolution with periodic or zero padding, forward and backward.

The fast path pads, takes sliding windows, and contracts with einsum (a
vectorized direct convolution; no FFT). ``conv2d_reference`` is the
literal six-loop definition kept as the correctness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError, Tensor, _apply

PAD_MODES = ("periodic", "zero")


@dataclass
class ConvKernel:
    """Weights (C_out, C_in, kH, kW) with odd kH/kW, bias (C_out,)."""

    weights: np.ndarray
    bias: np.ndarray
    padding: str = "periodic"

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4:
            raise ShapeError(f"kernel weights must be 4-D, got {w.shape}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {w.shape[2:]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} != (C_out,) = ({w.shape[0]},)")
        if self.padding not in PAD_MODES:
            raise ContractError(f"padding must be one of {PAD_MODES}")
        self.weights = w
        self.bias = b


def init_conv_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3,
                     padding: str = "periodic", dtype=np.float32) -> ConvKernel:
    """Uniform init in +-1/sqrt(fan_in) with fan_in = C_in*k*k; zero bias."""
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return ConvKernel(w, b, padding)


def _pad2d(x: np.ndarray, ph: int, pw: int, padding: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    if padding == "periodic":
        if ph:
            x = np.concatenate([x[:, :, -ph:], x, x[:, :, :ph]], axis=2)
        if pw:
            x = np.concatenate([x[:, :, :, -pw:], x, x[:, :, :, :pw]], axis=3)
        return x
    if padding == "zero":
        b, c, h, w = x.shape
        out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        out[:, :, ph:ph + h, pw:pw + w] = x
        return out
    raise ContractError(f"padding must be one of {PAD_MODES}")


def _check_conv_shapes(x: np.ndarray, w: np.ndarray):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (B,C,H,W), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )


_einsum_paths: dict = {}


def _contract(win: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum with a cached contraction path; the per-call path search
    # would otherwise dominate small step-loop convolutions
    key = (win.shape, w.shape, win.dtype.char, w.dtype.char)
    path = _einsum_paths.get(key)
    if path is None:
        path = np.einsum_path("bihwuv,oiuv->bohw", win, w, optimize="optimal")[0]
        _einsum_paths[key] = path
    return np.einsum("bihwuv,oiuv->bohw", win, w, optimize=path)


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: str) -> np.ndarray:
    """Same-size convolution of (B,C_in,H,W) with (C_out,C_in,kH,kW)."""
    _check_conv_shapes(x, w)
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad2d(x, kh // 2, kw // 2, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,Ci,H,W,kh,kw)
    out = _contract(win, w)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def _flip_swap(w: np.ndarray) -> np.ndarray:
    # adjoint kernel: swap channel roles and flip both spatial axes
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def conv2d_input_grad(grad_out: np.ndarray, w: np.ndarray, padding: str) -> np.ndarray:
    """Adjoint wrt input: correlation with the flipped kernel, same padding."""
    return conv2d_raw(grad_out, _flip_swap(w), None, padding)


def conv2d_param_grads(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray,
                       padding: str) -> tuple[np.ndarray, np.ndarray]:
    kh, kw = w.shape[2], w.shape[3]
    h, wid = x.shape[2], x.shape[3]
    xp = _pad2d(x, kh // 2, kw // 2, padding)
    positions = grad_out.shape[0] * h * wid
    if positions <= 1024:
        # small step-loop case: per-offset GEMMs beat the big contraction
        gw = np.empty(w.shape, dtype=x.dtype)
        gf = grad_out.reshape(grad_out.shape[0], w.shape[0], -1)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, :, u:u + h, v:v + wid].reshape(x.shape[0], x.shape[1], -1)
                gw[:, :, u, v] = np.einsum("boP,biP->oi", gf, patch, optimize=False)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        key = ("gw", grad_out.shape, win.shape, x.dtype.char)
        path = _einsum_paths.get(key)
        if path is None:
            path = np.einsum_path("bohw,bihwuv->oiuv", grad_out, win,
                                  optimize="optimal")[0]
            _einsum_paths[key] = path
        gw = np.einsum("bohw,bihwuv->oiuv", grad_out, win, optimize=path)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gw, gb


def conv2d_forward(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    return conv2d_raw(np.asarray(x), k.weights, k.bias, k.padding)


def conv2d_backward(grad_out: np.ndarray, saved_input: np.ndarray,
                    k: ConvKernel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(grad_input, grad_weights, grad_bias) for the same-padding conv."""
    grad_out = np.asarray(grad_out)
    saved_input = np.asarray(saved_input)
    gi = conv2d_input_grad(grad_out, k.weights, k.padding)
    gw, gb = conv2d_param_grads(grad_out, saved_input, k.weights, k.padding)
    return gi, gw, gb


def conv1x1(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Per-pixel channel mixing; requires a 1x1 kernel."""
    if k.weights.shape[2] != 1 or k.weights.shape[3] != 1:
        raise ContractError(f"conv1x1 requires a 1x1 kernel, got {k.weights.shape[2:]}")
    return conv2d_forward(x, k)


def conv2d_reference(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Literal nested-loop convolution; the oracle for conv2d_forward."""
    x = np.asarray(x)
    _check_conv_shapes(x, k.weights)
    w, bias = k.weights, k.bias
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    rh, rw = kh // 2, kw // 2
    out = np.zeros((bsz, cout, h, wid), dtype=x.dtype)
    for b in range(bsz):
        for o in range(cout):
            for y in range(h):
                for xx in range(wid):
                    acc = float(bias[o])
                    for i in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                iy = y + u - rh
                                ix = xx + v - rw
                                if k.padding == "periodic":
                                    val = x[b, i, iy % h, ix % wid]
                                elif 0 <= iy < h and 0 <= ix < wid:
                                    val = x[b, i, iy, ix]
                                else:
                                    val = 0.0
                                acc += float(w[o, i, u, v]) * float(val)
                    out[b, o, y, xx] = acc
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str) -> Tensor:
    """Tape-recorded convolution over tracked tensors."""
    out = conv2d_raw(x.data, w.data, b.data, padding)
    xd, wd = x.data, w.data

    def vjp(g):
        gi = conv2d_input_grad(g, wd, padding)
        gw, gb = conv2d_param_grads(g, xd, wd, padding)
        return gi, gw, gb

    return _apply("conv2d", out, (x, w, b), vjp)
