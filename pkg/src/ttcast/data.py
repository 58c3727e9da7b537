"""Volume sequences: the VSEQ1 container, splitting, normalization, synthetic fields.

VSEQ1 layout (all integers little-endian)::

    b"VSEQ" | u32 version | u32 header length | JSON header (utf-8)
    | zero padding to an 8-byte boundary | raw payload | u32 CRC-32 of payload

The header carries ``shape``, ``dtype`` (``"f32le"`` or ``"f32be"``),
``time_step_hours``, ``axes`` and ``payload_bytes``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"VSEQ"
VERSION = 1
AXES = ("time", "depth", "lon", "lat", "channel")
WINDOW = 20  # 10 context + 10 target frames


@dataclass
class VolumeSequence:
    data: np.ndarray  # T x D x H x W x C, float32
    time_step_hours: float = 12.0
    axes: tuple = field(default=AXES)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 5:
            raise ShapeError(f"volume sequence must be T x D x H x W x C, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ShapeError("volume sequence contains non-finite values")
        self.axes = tuple(self.axes)

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]


# --- VSEQ1 -----------------------------------------------------------------

def _pad8(n: int) -> int:
    return (-n) % 8


def to_bytes(seq: VolumeSequence, byteorder: str = "<") -> bytes:
    if byteorder not in "<>":
        raise ConfigError(f"byteorder must be '<' or '>', got {byteorder!r}")
    payload = seq.data.astype(byteorder + "f4").tobytes(order="C")
    header = json.dumps({
        "shape": list(seq.data.shape),
        "dtype": "f32le" if byteorder == "<" else "f32be",
        "time_step_hours": seq.time_step_hours,
        "axes": list(seq.axes),
        "payload_bytes": len(payload),
    }, sort_keys=True).encode()
    head = MAGIC + struct.pack("<II", VERSION, len(header)) + header
    head += b"\0" * _pad8(len(head))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def from_bytes(buf: bytes) -> VolumeSequence:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("bad magic, not a VSEQ1 file", "magic")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header ({exc})", "header") from None
    dtype = header.get("dtype")
    if dtype not in ("f32le", "f32be"):
        raise FormatError(f"unsupported dtype {dtype!r}", "dtype")
    shape = tuple(int(s) for s in header.get("shape", ()))
    if len(shape) != 5 or any(s < 1 for s in shape):
        raise FormatError(f"shape must have five positive extents, got {shape}", "shape")
    start = 12 + hlen
    start += _pad8(start)
    nbytes = 4 * math.prod(shape)
    if header.get("payload_bytes") != nbytes:
        raise FormatError(f"header shape {shape} implies {nbytes} bytes but header reports "
                          f"{header.get('payload_bytes')}", "shape")
    if len(buf) != start + nbytes + 4:
        raise FormatError(f"file holds {len(buf) - start - 4} payload bytes, shape {shape} "
                          f"needs {nbytes}", "payload")
    payload = buf[start:start + nbytes]
    (crc,) = struct.unpack_from("<I", buf, start + nbytes)
    if zlib.crc32(payload) != crc:
        raise FormatError("CRC-32 mismatch", "digest")
    order = "<" if dtype == "f32le" else ">"
    data = np.frombuffer(payload, dtype=order + "f4").reshape(shape).astype("<f4")
    return VolumeSequence(data, float(header.get("time_step_hours", 12.0)),
                          tuple(header.get("axes", AXES)))


def save(seq: VolumeSequence, path, byteorder: str = "<") -> str:
    """Write ``seq`` as VSEQ1; returns the sha256 digest of the file."""
    buf = to_bytes(seq, byteorder)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load(path) -> VolumeSequence:
    return from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- splitting and normalization -----------------------------------------

def split_index(t: int, train_fraction: float = 0.8) -> int:
    return int(math.floor(t * train_fraction + 1e-9))


def split(seq, train_fraction: float = 0.8, window: int = WINDOW):
    """Contiguous prefix/suffix split. Works on arrays or VolumeSequence."""
    data = seq.data if isinstance(seq, VolumeSequence) else np.asarray(seq)
    t = data.shape[0]
    cut = split_index(t, train_fraction)
    if cut < window or t - cut < window:
        raise ConfigError(f"series of {t} frames splits into {cut}/{t - cut}; each side "
                          f"needs at least {window} frames")
    if isinstance(seq, VolumeSequence):
        return (VolumeSequence(data[:cut], seq.time_step_hours, seq.axes),
                VolumeSequence(data[cut:], seq.time_step_hours, seq.axes))
    return data[:cut], data[cut:]


def windows(data, length: int = WINDOW, stride: int = 1) -> np.ndarray:
    """All length-``length`` windows along axis 0, stacked on a new leading axis."""
    data = np.asarray(data)
    n = (data.shape[0] - length) // stride + 1
    if n < 1:
        raise ConfigError(f"{data.shape[0]} frames cannot hold a {length}-frame window")
    return np.stack([data[i * stride:i * stride + length] for i in range(n)])


@dataclass
class NormStats:
    mean: np.ndarray  # per channel
    std: np.ndarray
    fallback: tuple = ()  # channels whose variance was zero

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "fallback": list(self.fallback)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64), tuple(d.get("fallback", ())))


def fit_normalizer(train) -> NormStats:
    """Per-channel (last axis) mean and standard deviation of training data."""
    x = np.asarray(train, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    fallback = tuple(int(c) for c in np.nonzero(std == 0)[0])
    if fallback:
        warnings.warn(f"zero-variance channels {fallback}; using unit scale", stacklevel=2)
        std = np.where(std == 0, 1.0, std)
    return NormStats(mean, std, fallback)


def normalize(x, stats: NormStats | None = None):
    """Z-score ``x`` per channel; statistics come from ``x`` unless given."""
    if stats is None:
        stats = fit_normalizer(x)
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std, stats


def denormalize(x, stats: NormStats):
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


# --- synthetic fields ------------------------------------------------------

def _laplacian(v: np.ndarray) -> np.ndarray:
    """5-point Laplacian over axes (-3, -2) with replicate boundaries."""
    p = np.pad(v, [(0, 0)] * (v.ndim - 3) + [(1, 1), (1, 1), (0, 0)], mode="edge")
    return (p[..., :-2, 1:-1, :] + p[..., 2:, 1:-1, :] + p[..., 1:-1, :-2, :]
            + p[..., 1:-1, 2:, :] - 4.0 * v)


def check_stability(kind: str, alpha: float = 0.0, c2: float = 0.0) -> None:
    if kind in ("diffusion", "mixed") and not 0.0 <= alpha <= 0.25:
        raise ConfigError(f"alpha={alpha} violates the explicit diffusion bound 0 <= alpha <= 0.25")
    if kind in ("wave", "mixed") and not 0.0 <= 2.0 * c2 <= 1.0:
        raise ConfigError(f"c2={c2} violates the explicit wave bound 2*c2 <= 1")


def smooth_initial(d, h, w, rng, modes: int = 4, amplitude: float = 0.5):
    """Sum of low-wavenumber sinusoids per depth; channel 1 is phase-shifted by 90 degrees."""
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((d, h, w, 2))
    for k in range(d):
        for _ in range(modes):
            ky, kx = rng.integers(0, 3, size=2)
            if ky == kx == 0:
                kx = 1
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal(0, amplitude / math.sqrt(modes))
            arg = np.pi * ky * (y + 0.5) / h + np.pi * kx * (x + 0.5) / w + phase
            out[k, :, :, 0] += amp * np.sin(arg)
            out[k, :, :, 1] += amp * np.cos(arg)
    return out


def generate_synthetic(kind: str, t: int, d: int, h: int, w: int, alpha: float = 0.1,
                       c2: float = 0.2, seed: int = 0, substeps: int = 1,
                       initial: np.ndarray | None = None) -> VolumeSequence:
    """Integrate a diffusion, wave or mixed (wave then diffusion) field.

    Depth layers evolve independently. Frames are taken every ``substeps``
    explicit steps, starting from the initial condition. The wave starts at
    rest (previous level equals the initial one).
    """
    if kind not in ("diffusion", "wave", "mixed"):
        raise ConfigError(f"kind must be diffusion, wave or mixed, got {kind!r}")
    check_stability(kind, alpha, c2)
    if min(t, d, h, w, substeps) < 1:
        raise ConfigError("all extents and substeps must be >= 1")
    rng = np.random.default_rng(seed)
    if initial is None:
        v = smooth_initial(d, h, w, rng)
    else:
        init = np.asarray(initial, dtype=np.float64)
        if init.ndim == 2:
            init = init[None, :, :, None]
        v = np.broadcast_to(init, (d, h, w, 2)).copy()
    prev = v.copy()
    frames = [v.copy()]
    for _ in range(t - 1):
        for _ in range(substeps):
            if kind == "diffusion":
                v = v + alpha * _laplacian(v)
            else:
                nxt = 2.0 * v - prev + c2 * _laplacian(v)
                if kind == "mixed":
                    nxt = nxt + alpha * _laplacian(nxt)
                prev, v = v, nxt
        frames.append(v.copy())
    return VolumeSequence(np.stack(frames).astype(np.float32))


def wave_energy(v_prev: np.ndarray, v: np.ndarray, c2: float) -> float:
    """Discrete energy conserved by the leapfrog wave update.

    Kinetic part from the time difference plus the staggered gradient part
    ``-c2 <v, Lap v_prev>``.
    """
    kinetic = np.sum((v - v_prev) ** 2)
    gradient = -c2 * np.sum(v * _laplacian(v_prev))
    return float(kinetic + gradient)
