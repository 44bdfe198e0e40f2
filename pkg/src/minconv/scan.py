"""Linear recurrence h_t = a_t * h_{t-1} + b_t over (B,T,C,H,W) lanes.

Three interchangeable backends compute the same values:

* ``scan_sequential``: one fused multiply-add per step, lanes vectorized.
* ``scan_blelloch``: work-efficient pair scan with the associative
  operator (a1,b1) o (a2,b2) = (a1*a2, a2*b1 + b2); O(log T) depth,
  non-power-of-two T padded with the identity element (1, 0).
* ``scan_logdomain``: cumulative log-decays plus a two-accumulator signed
  log-sum-exp; requires decays in (0, 1].

``scan_backward`` is the adjoint: itself a reverse-time linear recurrence,
available both as a plain loop and through the pair scan.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import runtime
from .tensor import ContractError, NumericError, ShapeError, Tensor, _apply

BACKENDS = ("sequential", "blelloch", "logdomain")


def log_zero(dtype) -> float:
    """Sentinel for log(0): the most negative finite float of the dtype."""
    return float(np.finfo(np.dtype(dtype)).min)


@dataclass
class ScanCoeffs:
    """Per-step decay/input pair with initial state.

    Linear repr: ``a``/``b`` are (B,T,C,H,W) values. Signed-log repr:
    ``log_a`` holds log-decays (<= 0) and ``log_b``/``b_sign`` the
    magnitude/sign split of b, with sign 0 paired to the log-zero
    sentinel. ``h0`` is always linear.
    """

    h0: np.ndarray
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    log_a: np.ndarray | None = None
    log_b: np.ndarray | None = None
    b_sign: np.ndarray | None = None

    @property
    def repr(self) -> str:
        return "linear" if self.a is not None else "signed-log"

    def __post_init__(self):
        self.h0 = np.asarray(self.h0)
        if self.a is not None:
            self.a = np.asarray(self.a)
            self.b = np.asarray(self.b)
            if self.a.shape != self.b.shape:
                raise ShapeError(f"a shape {self.a.shape} != b shape {self.b.shape}")
            lane = self.a.shape[:1] + self.a.shape[2:]
        else:
            if self.log_a is None or self.log_b is None or self.b_sign is None:
                raise ContractError("signed-log coeffs need log_a, log_b and b_sign")
            self.log_a = np.asarray(self.log_a)
            self.log_b = np.asarray(self.log_b)
            self.b_sign = np.asarray(self.b_sign)
            if not (self.log_a.shape == self.log_b.shape == self.b_sign.shape):
                raise ShapeError("signed-log fields must share one shape")
            lane = self.log_a.shape[:1] + self.log_a.shape[2:]
        if self.h0.shape != lane:
            raise ShapeError(f"h0 shape {self.h0.shape} != lane shape {lane}")

    @property
    def steps(self) -> int:
        arr = self.a if self.a is not None else self.log_a
        return arr.shape[1]


def to_signed_log(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split values into (log|v|, sign); zeros map to the log-zero sentinel."""
    v = np.asarray(v)
    sign = np.sign(v)
    mag = np.abs(v)
    out = np.full(v.shape, log_zero(v.dtype), dtype=v.dtype)
    nz = mag > 0
    out[nz] = np.log(mag[nz])
    return out, sign


def coeffs_to_signed_log(c: ScanCoeffs) -> ScanCoeffs:
    """Convert linear coeffs to signed-log; decays must lie in (0, 1]."""
    if c.repr == "signed-log":
        return c
    if np.any(c.a > 1.0) or np.any(c.a <= 0.0):
        raise ContractError("log-domain repr requires decays in (0, 1]")
    log_b, b_sign = to_signed_log(c.b)
    return ScanCoeffs(h0=c.h0, log_a=np.log(c.a), log_b=log_b, b_sign=b_sign)


def _check_finite(h: np.ndarray):
    if np.isfinite(h).all():
        return
    bad = ~np.isfinite(h).reshape(h.shape[0], h.shape[1], -1).all(axis=(0, 2))
    step = int(np.flatnonzero(bad)[0])
    raise NumericError(f"scan produced non-finite values at step {step}")


def _lane_chunks(shape, workers):
    """Split the flattened lane axis into per-worker slices."""
    lanes = int(np.prod(shape[2:], dtype=np.int64)) if len(shape) > 2 else 1
    workers = min(workers, lanes) if lanes else 1
    if workers <= 1:
        return [slice(None)]
    bounds = np.linspace(0, lanes, workers + 1, dtype=int)
    return [slice(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _run_chunks(fn, chunks):
    if len(chunks) == 1:
        fn(chunks[0])
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(fn, chunks))


def scan_sequential(c: ScanCoeffs, workers: int | None = None) -> np.ndarray:
    """Reference evaluation: h_t = a_t*h_{t-1} + b_t, one step at a time."""
    if c.repr != "linear":
        raise ContractError("scan_sequential needs linear coeffs")
    a, b, h0 = c.a, c.b, c.h0
    T = a.shape[1]
    out = np.empty_like(b)
    av = a.reshape(a.shape[0], T, -1)
    bv = b.reshape(av.shape)
    hv = h0.reshape(h0.shape[0], -1)
    ov = out.reshape(av.shape)
    workers = runtime.get_workers() if workers is None else max(1, workers)

    def run(sl):
        prev = hv[:, sl]
        for t in range(T):
            prev = av[:, t, sl] * prev + bv[:, t, sl]
            ov[:, t, sl] = prev

    _run_chunks(run, _lane_chunks(av.shape, workers))
    _check_finite(out)
    return out


def _blelloch_sweeps(A: np.ndarray, B: np.ndarray):
    """In-place up/down sweeps turning (A,B) into exclusive prefix pairs.

    Time axis is axis 1 and must be a power of two.
    """
    Tp = A.shape[1]
    levels = Tp.bit_length() - 1
    for d in range(levels):
        half, step = 1 << d, 2 << d
        left = slice(half - 1, Tp, step)
        right = slice(step - 1, Tp, step)
        B[:, right] = A[:, right] * B[:, left] + B[:, right]
        A[:, right] = A[:, right] * A[:, left]
    A[:, -1] = 1.0
    B[:, -1] = 0.0
    for d in range(levels - 1, -1, -1):
        half, step = 1 << d, 2 << d
        left = slice(half - 1, Tp, step)
        right = slice(step - 1, Tp, step)
        ta = A[:, left].copy()
        tb = B[:, left].copy()
        A[:, left] = A[:, right]
        B[:, left] = B[:, right]
        # compose: parent prefix first, then old left subtree total
        B[:, right] = ta * B[:, right] + tb
        A[:, right] = A[:, right] * ta


def scan_blelloch(c: ScanCoeffs, workers: int | None = None) -> np.ndarray:
    """Pair-scan evaluation; identical values to scan_sequential."""
    if c.repr != "linear":
        raise ContractError("scan_blelloch needs linear coeffs")
    a, b, h0 = c.a, c.b, c.h0
    bsz, T = a.shape[0], a.shape[1]
    Tp = 1 << max(0, (T - 1).bit_length())
    av = a.reshape(bsz, T, -1)
    bv = b.reshape(bsz, T, -1)
    hv = h0.reshape(bsz, -1)
    out = np.empty_like(b).reshape(bsz, T, -1)
    workers = runtime.get_workers() if workers is None else max(1, workers)

    def run(sl):
        A = np.ones((bsz, Tp, av[:, :, sl].shape[2]), dtype=a.dtype)
        B = np.zeros_like(A)
        A[:, :T] = av[:, :, sl]
        B[:, :T] = bv[:, :, sl]
        _blelloch_sweeps(A, B)
        # inclusive prefix = exclusive o own element
        Ai = A[:, :T] * av[:, :, sl]
        Bi = av[:, :, sl] * B[:, :T] + bv[:, :, sl]
        out[:, :, sl] = Ai * hv[:, None, sl] + Bi

    _run_chunks(run, _lane_chunks(av.shape, workers))
    res = out.reshape(b.shape)
    _check_finite(res)
    return res


def scan_logdomain(c: ScanCoeffs) -> np.ndarray:
    """Log-domain evaluation for decays in (0, 1].

    Works on cumulative sums of log-decays; positive and negative input
    mass are accumulated in separate log-sum-exp streams and recombined.
    Internals run in f64 to keep exp/log round-trips below the f32
    tolerance; the result is cast back to the input dtype.
    """
    if c.repr == "linear":
        c = coeffs_to_signed_log(c)
    if np.any(c.log_a > 0):
        raise ContractError("log-domain scan requires gates in (0, 1]: log a <= 0")
    out_dtype = c.log_a.dtype
    la = c.log_a.astype(np.float64)
    lb = c.log_b.astype(np.float64)
    sb = c.b_sign.astype(np.float64)
    h0 = c.h0.astype(np.float64)

    ninf = np.float64(log_zero(np.float64))
    A = np.cumsum(la, axis=1)  # (B,T,...) cumulative log-decays
    # per-source term: log|b_tau| - A_tau; h0 enters at tau=0 with A_0 = 0
    lh0, sh0 = to_signed_log(h0)
    terms = np.concatenate([lh0[:, None], lb - A], axis=1)
    signs = np.concatenate([sh0[:, None], sb], axis=1)
    pos = np.where(signs > 0, terms, ninf)
    neg = np.where(signs < 0, terms, ninf)
    P = np.logaddexp.accumulate(pos, axis=1)[:, 1:]
    N = np.logaddexp.accumulate(neg, axis=1)[:, 1:]
    h = np.exp(A + P) - np.exp(A + N)
    _check_finite(h)
    return h.astype(out_dtype, copy=False)


def _lambda_coeffs(a: np.ndarray, grad_h: np.ndarray) -> ScanCoeffs:
    # lambda_t = g_t + a_{t+1} * lambda_{t+1}, reversed into a forward scan
    at = np.concatenate([np.ones_like(a[:, :1]), a[:, :0:-1]], axis=1)
    bt = grad_h[:, ::-1]
    return ScanCoeffs(h0=np.zeros_like(a[:, 0]), a=at, b=bt)


def scan_backward(a: np.ndarray, h_seq: np.ndarray, h0: np.ndarray,
                  grad_h: np.ndarray, via: str = "loop"
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of the scan: gradients for (a, b, h0) from per-step grads.

    ``via='loop'`` runs the reverse recurrence directly; ``via='scan'``
    reuses the forward pair scan on reversed time. Both give bit-identical
    results in f64.
    """
    a = np.asarray(a)
    grad_h = np.asarray(grad_h)
    T = a.shape[1]
    if via == "loop":
        lam = np.empty_like(grad_h)
        lam[:, T - 1] = grad_h[:, T - 1]
        for t in range(T - 2, -1, -1):
            lam[:, t] = a[:, t + 1] * lam[:, t + 1] + grad_h[:, t]
    elif via == "scan":
        lam = scan_sequential(_lambda_coeffs(a, grad_h), workers=1)[:, ::-1]
    else:
        raise ContractError("via must be 'loop' or 'scan'")
    h_prev = np.concatenate([h0[:, None], h_seq[:, :-1]], axis=1)
    grad_a = lam * h_prev
    grad_b = lam
    grad_h0 = a[:, 0] * lam[:, 0]
    return grad_a, np.ascontiguousarray(grad_b), grad_h0


def scan(c: ScanCoeffs, backend: str = "sequential", workers: int | None = None) -> np.ndarray:
    if backend == "sequential":
        return scan_sequential(c, workers)
    if backend == "blelloch":
        return scan_blelloch(c, workers)
    if backend == "logdomain":
        return scan_logdomain(c)
    raise ContractError(f"unknown backend {backend!r}; expected one of {BACKENDS}")


def linear_scan(a: Tensor, b: Tensor, h0: Tensor, backend: str = "blelloch",
                workers: int | None = None) -> Tensor:
    """Tape-recorded scan over tracked coefficient tensors.

    The value may come from any backend; the recorded adjoint is the
    backend-independent reverse recurrence.
    """
    coeffs = ScanCoeffs(h0=h0.data, a=a.data, b=b.data)
    h = scan(coeffs, backend=backend, workers=workers)
    ad, h0d = a.data, h0.data

    def vjp(g):
        return scan_backward(ad, h, h0d, g, via="loop")

    return _apply("scan", h, (a, b, h0), vjp)
