"""Sampled continuous paths on a uniform master grid.

A path is stored as ``values[k] = omega(k * T / M)`` for ``k = 0..M``.  Every
other object in the package (partitions, functionals, sums) refers to times
through master-grid indices, so stopping, snapping and approximation are exact
array operations.

Random paths use the counter-based Philox generator from numpy, seeded with
the integer seed recorded on the path.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"FQVP"
FORMAT_VERSION = 1
GENERATOR_NAME = "philox"


class ParameterError(ValueError):
    """Invalid grid, horizon or generator parameter."""


class PartitionError(ValueError):
    """Partition indices that are unsorted, out of range or missing endpoints."""


@dataclass(frozen=True, eq=False)
class SampledPath:
    """A ``dim``-dimensional path sampled at ``M + 1`` uniform times on ``[0, T]``."""

    values: np.ndarray
    horizon: float = 1.0
    label: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 2 or vals.shape[1] < 1:
            raise ParameterError(f"values must have shape (M+1, d) with M >= 1, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("path values must be finite")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ParameterError(f"horizon must be positive, got {self.horizon}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def M(self) -> int:
        return self.values.shape[0] - 1

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return self.horizon / self.M

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index nearest to ``t``; exact ties go to the lower index."""
        return snap_index(t, self.horizon, self.M)

    def time_of(self, k) -> np.ndarray:
        return np.asarray(k) * self.dt

    def replace(self, values=None, label=None) -> "SampledPath":
        return SampledPath(
            self.values if values is None else values,
            horizon=self.horizon,
            label=self.label if label is None else label,
            seed=self.seed,
        )

    def __eq__(self, other):
        if not isinstance(other, SampledPath):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.label == other.label
            and self.seed == other.seed
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    __hash__ = None


def snap_index(t: float, T: float, M: int) -> int:
    if not (0.0 <= t <= T):
        raise ParameterError(f"time {t} outside [0, {T}]")
    x = t * M / T
    k = int(np.ceil(x - 0.5))
    return min(max(k, 0), M)


def _check_grid(T: float, M: int, min_M: int = 2) -> None:
    if not isinstance(M, (int, np.integer)) or M < min_M:
        raise ParameterError(f"grid size M must be an integer >= {min_M}, got {M!r}")
    if not (T > 0 and np.isfinite(T)):
        raise ParameterError(f"horizon T must be positive, got {T!r}")


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: Philox keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _correlate(z: np.ndarray, corr) -> np.ndarray:
    if corr is None:
        return z
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (z.shape[1], z.shape[1]):
        raise ParameterError(f"correlation matrix must be {z.shape[1]}x{z.shape[1]}")
    return z @ np.linalg.cholesky(corr).T


def generate_brownian(dim: int, T: float, M: int, seed: int, rng=None, corr=None) -> SampledPath:
    """Brownian path: cumulative sum of N(0, T/M) increments, started at 0.

    ``rng`` replaces the seeded Philox stream (anything with a numpy-style
    ``standard_normal(size)``); ``corr`` correlates the coordinates.
    """
    _check_grid(T, M)
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    gen = make_rng(seed) if rng is None else rng
    z = np.asarray(gen.standard_normal((M, dim)), dtype=float)
    incr = _correlate(z, corr) * np.sqrt(T / M)
    values = np.zeros((M + 1, dim))
    np.cumsum(incr, axis=0, out=values[1:])
    return SampledPath(values, T, label=f"brownian(dim={dim},M={M},T={T!r},seed={seed})", seed=seed)


def fgn_eigenvalues(H: float, M: int) -> np.ndarray:
    """Eigenvalues of the size-2M circulant embedding of unit-step fGn covariance."""
    k = np.arange(M + 1, dtype=float)
    gamma = 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    return np.fft.rfft(row).real


def generate_fbm(dim: int, H: float, T: float, M: int, seed: int, rng=None, corr=None) -> SampledPath:
    """Fractional Brownian motion by circulant embedding of the increment covariance.

    Each coordinate is synthesised from its own block of 2M standard normals.
    Negative embedding eigenvalues (numerically impossible for fGn, but kept
    as a guard) are clipped to zero and the label gets a ``clipped`` marker.
    """
    _check_grid(T, M)
    if not (0.0 < H < 1.0):
        raise ParameterError(f"Hurst index must be in (0, 1), got {H}")
    if M & (M - 1):
        raise ParameterError(f"M must be a power of two for circulant synthesis, got {M}")
    lam_half = fgn_eigenvalues(H, M)
    lam = np.concatenate([lam_half, lam_half[-2:0:-1]])
    clipped = bool(np.min(lam) < 0)
    if clipped:
        lam = np.clip(lam, 0.0, None)
    scale = np.sqrt(lam / (2 * M))
    gen = make_rng(seed) if rng is None else rng
    z = np.asarray(gen.standard_normal((dim, 2, 2 * M)), dtype=float)
    incr = np.empty((M, dim))
    for j in range(dim):
        w = np.fft.fft(scale * (z[j, 0] + 1j * z[j, 1]))
        incr[:, j] = w.real[:M]
    incr = _correlate(incr, corr) * (T / M) ** H
    values = np.zeros((M + 1, dim))
    np.cumsum(incr, axis=0, out=values[1:])
    label = f"fbm(dim={dim},H={H!r},M={M},T={T!r},seed={seed})"
    if clipped:
        label += "[clipped]"
    return SampledPath(values, T, label=label, seed=seed)


def generate_constant(dim: int, T: float, M: int, level: float = 0.0) -> SampledPath:
    _check_grid(T, M, min_M=1)
    values = np.full((M + 1, dim), float(level))
    return SampledPath(values, T, label=f"constant({level!r})")


def generate_smooth(dim: int, T: float, M: int, spec: dict) -> SampledPath:
    """Deterministic smooth path, identical in every coordinate.

    ``spec`` keys: ``poly`` (coefficients c0, c1, ... of ``sum c_j t^j``) and
    ``sin`` (list of ``[amplitude, frequency, phase]`` giving
    ``a * sin(2 pi f t + phase)``).  Terms add up.
    """
    _check_grid(T, M, min_M=1)
    t = np.arange(M + 1) * (T / M)
    x = np.zeros_like(t)
    coeffs = spec.get("poly")
    if coeffs:
        x = x + np.polynomial.polynomial.polyval(t, np.asarray(coeffs, dtype=float))
    for amp, freq, *rest in spec.get("sin", []):
        phase = rest[0] if rest else 0.0
        x = x + amp * np.sin(2 * np.pi * freq * t + phase)
    unknown = set(spec) - {"poly", "sin"}
    if unknown:
        raise ParameterError(f"unknown smooth-path terms: {sorted(unknown)}")
    return SampledPath(np.repeat(x[:, None], dim, axis=1), T, label=f"smooth({spec})")


def linear_path(T: float = 1.0, M: int = 1024, dim: int = 1) -> SampledPath:
    """omega(t) = t in every coordinate."""
    return generate_smooth(dim, T, M, {"poly": [0.0, 1.0]})


def stop_path(path: SampledPath, t: float) -> SampledPath:
    """The path frozen at its (snapped) time-``t`` value from ``t`` onwards."""
    return stop_at_index(path, path.index_of(t))


def stop_at_index(path: SampledPath, k: int) -> SampledPath:
    if not 0 <= k <= path.M:
        raise ParameterError(f"grid index {k} outside [0, {path.M}]")
    vals = np.array(path.values)
    vals[k + 1:] = vals[k]
    return path.replace(values=vals)


def check_partition(indices: Sequence[int], M: int) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.size < 2:
        raise PartitionError("a partition needs at least two points")
    if not np.issubdtype(idx.dtype, np.integer):
        raise PartitionError("partition indices must be integers")
    if idx[0] != 0 or idx[-1] != M:
        raise PartitionError(f"partition must start at 0 and end at {M}")
    if np.any(np.diff(idx) <= 0):
        raise PartitionError("partition indices must be strictly increasing")
    return idx.astype(np.int64)


def piecewise_constant_values(values: np.ndarray, indices) -> np.ndarray:
    """Array form of the step approximation: value at t_{i+1} on [t_i, t_{i+1})."""
    M = values.shape[0] - 1
    idx = check_partition(indices, M)
    cell = np.searchsorted(idx, np.arange(M + 1), side="right") - 1
    cell[-1] = idx.size - 2
    out = values[idx[cell + 1]]
    out[M] = values[M]
    return out


def piecewise_constant_approx(path: SampledPath, indices) -> SampledPath:
    """Right-endpoint step approximation of a continuous path along a partition."""
    return path.replace(values=piecewise_constant_values(path.values, indices))


@dataclass
class HolderEstimate:
    exponent: float
    norm_estimate: float
    scales_used: list = field(default_factory=list)
    r_squared: float = 1.0


def max_increments(values: np.ndarray, lags) -> np.ndarray:
    out = []
    for lag in lags:
        d = values[lag:] - values[:-lag]
        out.append(float(np.max(np.sqrt(np.sum(d * d, axis=1)))))
    return np.array(out)


def holder_estimate(path: SampledPath, scale_range=None) -> HolderEstimate:
    """Point estimate of the Holder exponent from sup-increments at dyadic lags.

    ``scale_range`` is ``(j_min, j_max)``: lags ``2^j`` grid steps for
    ``j_min <= j <= j_max``.  The default uses lags from 4 steps to M/16.
    """
    M = path.M
    top = int(np.floor(np.log2(M)))
    j_min, j_max = scale_range if scale_range is not None else (2, top - 4)
    j_max = min(j_max, top)
    lags = [2 ** j for j in range(j_max, j_min - 1, -1)]
    if len(lags) < 4:
        raise ParameterError(f"need at least 4 dyadic scales, got {len(lags)}")
    scales = [lag * path.dt for lag in lags]
    incs = max_increments(path.values, lags)
    if np.all(incs == 0):
        return HolderEstimate(1.0, 0.0, scales, 1.0)
    x = np.log(scales)
    y = np.log(np.maximum(incs, np.finfo(float).tiny))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    norm = float(np.max(incs / np.asarray(scales) ** slope))
    return HolderEstimate(float(slope), norm, scales, min(max(r2, 0.0), 1.0))


# -- serialization ------------------------------------------------------------

_HEADER = struct.Struct("<4sHIQdB q I")


def to_bytes(path: SampledPath) -> bytes:
    label = path.label.encode("utf-8")
    has_seed = path.seed is not None
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, path.dim, path.M, path.horizon,
                        int(has_seed), int(path.seed) if has_seed else 0, len(label))
    body = np.ascontiguousarray(path.values, dtype="<f8").tobytes()
    return head + label + body


def from_bytes(blob: bytes) -> SampledPath:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated path container")
    magic, version, d, M, T, has_seed, seed, nlabel = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = _HEADER.size
    label = blob[off:off + nlabel].decode("utf-8")
    off += nlabel
    expected = (M + 1) * d * 8
    if len(blob) - off != expected:
        raise ValueError(f"body has {len(blob) - off} bytes, expected {expected}")
    vals = np.frombuffer(blob, dtype="<f8", offset=off).reshape(M + 1, d)
    return SampledPath(vals, T, label=label, seed=seed if has_seed else None)


def save_path(path: SampledPath, filename) -> None:
    Path(filename).write_bytes(to_bytes(path))


def load_path(filename) -> SampledPath:
    return from_bytes(Path(filename).read_bytes())


def to_csv(path: SampledPath) -> str:
    buf = io.StringIO()
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(path.dim)])
    data = np.column_stack([path.times, path.values])
    np.savetxt(buf, data, delimiter=",", header=header, comments="", fmt="%.17g")
    return buf.getvalue()


def from_csv(text: str, label: str = "", seed: Optional[int] = None) -> SampledPath:
    data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    return SampledPath(data[:, 1:], horizon=float(t[-1]), label=label, seed=seed)
