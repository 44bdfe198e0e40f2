"""Spatiotemporal dataset generation and the STDF on-disk container.

The fluid generator integrates 2-D incompressible vorticity dynamics
(pseudo-spectral, 2/3-rule dealiasing, RK4) on the periodic square. The
advection generator is a closed-form smoke test: Gaussian blobs drifting
at constant velocity with optional diffusion, no solver involved.

STDF layout: magic "STDF", u32 version, u32 N,T,C,H,W, u32 dtype tag,
row-major little-endian payload, then one fixed-width record per channel
(f64 mean, f64 std, u32 fallback flag) describing the normalization that
was applied.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError

STDF_MAGIC = b"STDF"
STDF_VERSION = 1
_DTYPE_TAGS = {0: "<f4", 1: "<f8"}
_TAG_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class StdfError(ValueError):
    """STDF file violates the format; .code names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class GenerationError(RuntimeError):
    """A simulation left its stability envelope."""


@dataclass
class ChannelStats:
    mean: float
    std: float
    fallback: bool = False  # std was ~0 and replaced by 1


@dataclass
class StdfDataset:
    data: np.ndarray  # (N,T,C,H,W), stored normalized
    stats: list[ChannelStats] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ConfigError(f"dataset must be (N,T,C,H,W), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def denormalized(self) -> np.ndarray:
        out = self.data.astype(np.float64).copy()
        for c, st in enumerate(self.stats):
            out[:, :, c] = out[:, :, c] * st.std + st.mean
        return out


def normalize_dataset(data: np.ndarray, stats: list[ChannelStats] | None = None
                      ) -> tuple[np.ndarray, list[ChannelStats]]:
    """Per-channel z-score; pass training stats to reuse them on val/test."""
    data = np.asarray(data)
    channels = data.shape[2]
    if stats is None:
        stats = []
        for c in range(channels):
            mean = float(data[:, :, c].mean())
            std = float(data[:, :, c].std())
            fallback = std < 1e-12
            stats.append(ChannelStats(mean, 1.0 if fallback else std, fallback))
    elif len(stats) != channels:
        raise ConfigError(f"{len(stats)} stats records for {channels} channels")
    out = np.empty_like(data)
    for c, st in enumerate(stats):
        out[:, :, c] = (data[:, :, c] - st.mean) / st.std
    return out, stats


def write_stdf(path, data: np.ndarray, stats: list[ChannelStats] | None = None) -> None:
    data = np.asarray(data)
    if data.ndim != 5:
        raise ConfigError(f"STDF payload must be (N,T,C,H,W), got {data.shape}")
    if data.dtype not in (np.float32, np.float64):
        data = data.astype(np.float32)
    stats = stats or [ChannelStats(0.0, 1.0) for _ in range(data.shape[2])]
    if len(stats) != data.shape[2]:
        raise ConfigError("one stats record per channel required")
    tag = _TAG_BY_DTYPE[data.dtype]
    with open(path, "wb") as fh:
        fh.write(STDF_MAGIC)
        fh.write(struct.pack("<7I", STDF_VERSION, *data.shape, tag))
        fh.write(np.ascontiguousarray(data, dtype=_DTYPE_TAGS[tag]).tobytes())
        for st in stats:
            fh.write(struct.pack("<ddI", st.mean, st.std, int(st.fallback)))


def read_stdf(path) -> StdfDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != STDF_MAGIC:
        raise StdfError("bad_magic", f"not an STDF file: magic {blob[:4]!r}")
    if len(blob) < 4 + 28:
        raise StdfError("truncated", "file shorter than the STDF header")
    version, n, t, c, h, w, tag = struct.unpack("<7I", blob[4:32])
    if version != STDF_VERSION:
        raise StdfError("bad_version", f"unsupported STDF version {version}")
    if tag not in _DTYPE_TAGS:
        raise StdfError("bad_dtype", f"unknown dtype tag {tag}")
    dtype = np.dtype(_DTYPE_TAGS[tag])
    count = n * t * c * h * w
    payload_len = count * dtype.itemsize
    footer_len = c * struct.calcsize("<ddI")
    if len(blob) != 32 + payload_len + footer_len:
        raise StdfError(
            "bad_length",
            f"expected {32 + payload_len + footer_len} bytes, file has {len(blob)}")
    data = np.frombuffer(blob[32:32 + payload_len], dtype=dtype)
    data = data.reshape(n, t, c, h, w).copy()
    stats = []
    off = 32 + payload_len
    for _ in range(c):
        mean, std, flag = struct.unpack_from("<ddI", blob, off)
        stats.append(ChannelStats(mean, std, bool(flag)))
        off += struct.calcsize("<ddI")
    return StdfDataset(data, stats)


def downsample(seq: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping block mean over the two trailing spatial axes."""
    seq = np.asarray(seq)
    if factor == 1:
        return seq
    h, w = seq.shape[-2], seq.shape[-1]
    if h % factor or w % factor:
        raise ConfigError(f"grid {h}x{w} not divisible by factor {factor}")
    lead = seq.shape[:-2]
    blocks = seq.reshape(lead + (h // factor, factor, w // factor, factor))
    return blocks.mean(axis=(-3, -1))


@dataclass(frozen=True)
class NsConfig:
    """Vorticity simulation settings; viscosity defaults to 1/Re at Re=1e3."""

    n: int = 64
    frames: int = 50
    viscosity: float = 1e-3
    dt: float = 1e-3
    steps_per_frame: int = 20
    seed: int = 0
    band: tuple[int, int] = (1, 6)
    amplitude: float = 3.0

    def __post_init__(self):
        if self.n < 4 or (self.n & (self.n - 1)) != 0:
            raise ConfigError("grid size must be a power of two >= 4")
        if self.frames < 1 or self.dt <= 0 or self.steps_per_frame < 1:
            raise ConfigError("frames, dt and steps_per_frame must be positive")


def _spectral_operators(n: int):
    k = np.fft.fftfreq(n, 1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    ksq = kx * kx + ky * ky
    inv_ksq = np.zeros_like(ksq)
    nz = ksq > 0
    inv_ksq[nz] = 1.0 / ksq[nz]
    kmax = n / 3.0  # 2/3 dealiasing rule
    dealias = (np.abs(kx) <= kmax) & (np.abs(ky) <= kmax)
    return kx, ky, ksq, inv_ksq, dealias


def random_band_limited_field(n: int, band: tuple[int, int], amplitude: float,
                              rng: np.random.Generator) -> np.ndarray:
    """Random real field with spectral support on band <= |k| <= band."""
    kx, ky, ksq, _, _ = _spectral_operators(n)
    kmag = np.sqrt(ksq)
    mask = (kmag >= band[0]) & (kmag <= band[1])
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * mask
    fld = np.real(np.fft.ifft2(spec))
    peak = np.abs(fld).max()
    if peak > 0:
        fld *= amplitude / peak
    return fld


def _vorticity_rhs(omega_hat, kx, ky, ksq, inv_ksq, dealias, nu):
    psi_hat = omega_hat * inv_ksq
    u = np.real(np.fft.ifft2(1j * ky * psi_hat))
    v = np.real(np.fft.ifft2(-1j * kx * psi_hat))
    wx = np.real(np.fft.ifft2(1j * kx * omega_hat))
    wy = np.real(np.fft.ifft2(1j * ky * omega_hat))
    adv_hat = np.fft.fft2(u * wx + v * wy) * dealias
    rhs = -adv_hat - nu * ksq * omega_hat
    rhs[0, 0] = 0.0  # advection has zero mean; keeps mean vorticity exact
    return rhs


def simulate_navier_stokes(cfg: NsConfig, omega0: np.ndarray | None = None,
                           diagnostics: bool = False):
    """Integrate the periodic vorticity equation; returns (frames,1,n,n).

    Streamfunction comes from a spectral Poisson solve, the advection term
    is dealiased with the 2/3 rule, and time stepping is RK4. Any
    |vorticity| above 1e6 aborts with the offending step.
    """
    kx, ky, ksq, inv_ksq, dealias = _spectral_operators(cfg.n)
    rng = np.random.default_rng(cfg.seed)
    if omega0 is None:
        omega0 = random_band_limited_field(cfg.n, cfg.band, cfg.amplitude, rng)
    omega_hat = np.fft.fft2(np.asarray(omega0, dtype=np.float64))
    nu, dt = cfg.viscosity, cfg.dt
    frames = np.empty((cfg.frames, 1, cfg.n, cfg.n), dtype=np.float64)
    diag = {"enstrophy": [], "energy": [], "mean": [], "cfl": []}

    def record(omega):
        diag["enstrophy"].append(float((omega ** 2).mean()))
        psi_hat = np.fft.fft2(omega) * inv_ksq
        u = np.real(np.fft.ifft2(1j * ky * psi_hat))
        v = np.real(np.fft.ifft2(-1j * kx * psi_hat))
        diag["energy"].append(float((u * u + v * v).mean()))
        diag["mean"].append(float(omega.mean()))
        speed = float(np.sqrt(u * u + v * v).max())
        diag["cfl"].append(speed * dt / (2 * np.pi / cfg.n))

    step = 0
    for f in range(cfg.frames):
        frames[f, 0] = np.real(np.fft.ifft2(omega_hat))
        if diagnostics:
            record(frames[f, 0])
        for _ in range(cfg.steps_per_frame if f + 1 < cfg.frames else 0):
            k1 = _vorticity_rhs(omega_hat, kx, ky, ksq, inv_ksq, dealias, nu)
            k2 = _vorticity_rhs(omega_hat + 0.5 * dt * k1, kx, ky, ksq, inv_ksq, dealias, nu)
            k3 = _vorticity_rhs(omega_hat + 0.5 * dt * k2, kx, ky, ksq, inv_ksq, dealias, nu)
            k4 = _vorticity_rhs(omega_hat + dt * k3, kx, ky, ksq, inv_ksq, dealias, nu)
            omega_hat = omega_hat + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            step += 1
            # sum|w_hat|/n^2 bounds max|w| from above, so it can only over-trip
            bound = np.abs(omega_hat).sum() / omega_hat.size
            if not np.isfinite(bound) or bound > 1e6:
                w_phys = np.real(np.fft.ifft2(omega_hat))
                if not np.isfinite(w_phys).all() or np.abs(w_phys).max() > 1e6:
                    raise GenerationError(f"vorticity blew up at solver step {step}")
    if diagnostics:
        return frames, {k: np.asarray(v) for k, v in diag.items()}
    return frames


def simulate_advection(n: int, frames: int, velocity=(1.0, 0.0),
                       diffusion: float = 0.0, seed: int = 0,
                       blobs: int = 3) -> np.ndarray:
    """Gaussian blobs advected with periodic wraparound; closed form per frame.

    Diffusion widens each blob (variance grows by 2*D*t) while conserving
    its integral, so the field sum is invariant under pure advection.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0, n, size=(blobs, 2))
    amps = rng.uniform(0.5, 1.5, size=blobs)
    sigma0 = rng.uniform(1.5, 2.5, size=blobs)
    vy, vx = float(velocity[0]), float(velocity[1])
    ys, xs = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    out = np.empty((frames, 1, n, n), dtype=np.float64)
    for t in range(frames):
        fld = np.zeros((n, n))
        for (cy, cx), amp, s0 in zip(centers, amps, sigma0):
            var = s0 * s0 + 2.0 * diffusion * t
            dy = (ys - cy - vy * t + n / 2.0) % n - n / 2.0
            dx = (xs - cx - vx * t + n / 2.0) % n - n / 2.0
            fld += amp * (s0 * s0 / var) * np.exp(-(dy * dy + dx * dx) / (2.0 * var))
        out[t, 0] = fld
    return out


# seed offsets keeping split sample seeds disjoint
SPLIT_SEED_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def split_seed(base_seed: int, split: str, index: int) -> int:
    if split not in SPLIT_SEED_OFFSETS:
        raise ConfigError(f"unknown split {split!r}")
    if not 0 <= index < SPLIT_SEED_OFFSETS["val"]:
        raise ConfigError("sample index out of the reserved seed range")
    return base_seed + SPLIT_SEED_OFFSETS[split] + index


def make_navier_stokes_split(cfg: NsConfig, count: int, split: str,
                             base_seed: int, downsample_factor: int = 4) -> np.ndarray:
    samples = []
    for i in range(count):
        sample_cfg = NsConfig(n=cfg.n, frames=cfg.frames, viscosity=cfg.viscosity,
                              dt=cfg.dt, steps_per_frame=cfg.steps_per_frame,
                              seed=split_seed(base_seed, split, i), band=cfg.band,
                              amplitude=cfg.amplitude)
        samples.append(downsample(simulate_navier_stokes(sample_cfg), downsample_factor))
    return np.stack(samples, axis=0)


def make_advection_split(n: int, frames: int, count: int, split: str,
                         base_seed: int, velocity=(1.0, 0.0),
                         diffusion: float = 0.05) -> np.ndarray:
    samples = [
        simulate_advection(n, frames, velocity, diffusion,
                           seed=split_seed(base_seed, split, i))
        for i in range(count)
    ]
    return np.stack(samples, axis=0)


def ingest_raw_grid(path, height: int, width: int, stride: int = 1) -> StdfDataset:
    """Read flat little-endian f32 frames, downsample, and z-score normalize.

    The entry point for externally prepared grids (e.g. reanalysis fields
    exported as raw floats); returns a single-sequence dataset (N=1).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    frame_bytes = height * width * 4
    if frame_bytes == 0 or len(blob) % frame_bytes:
        raise StdfError(
            "bad_raw_length",
            f"file size {len(blob)} is not a multiple of {height}x{width} f32 frames")
    count = len(blob) // frame_bytes
    frames = np.frombuffer(blob, dtype="<f4").reshape(count, 1, height, width)
    frames = frames.astype(np.float64)
    if stride > 1:
        frames = downsample(frames, stride)
    data = frames[None, ...]  # (1, T, 1, H', W')
    norm, stats = normalize_dataset(data)
    return StdfDataset(norm.astype(np.float32), stats)
