"""Quadratic variation, pathwise integrals and the derived diagnostics.

All Stieltjes sums (against the path, against dt and against d[omega]) are
left-point sums over the cells of one partition level.  Totals are reduced
with ``np.sum`` (pairwise summation, fixed order).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import functionals as fn
from .partitions import Partition, PartitionSequence
from .paths import (ParameterError, SampledPath, generate_brownian, make_rng,
                    piecewise_constant_values)

ZERO_REMAINDER = 1e-14


@dataclass
class StepMatrixFunction:
    """Right-continuous matrix-valued step function, jumps at ``times``."""

    times: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> np.ndarray:
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.values[max(k, 0)]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


@dataclass
class IntegralEstimate:
    level: int
    value: float
    variant: str
    partial_sums: Optional[np.ndarray] = None


@dataclass
class RemainderSample:
    t: float
    s: float
    value: float

    @property
    def scale(self) -> float:
        return self.s - self.t


@dataclass
class ExponentFit:
    """Log-log slope of the largest sampled remainder per scale.

    ``exponent`` is ``inf`` when every remainder is numerically zero.
    """

    exponent: float
    r_squared: float = 1.0
    scales: List[float] = field(default_factory=list)
    maxima: List[float] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return np.isinf(self.exponent)


def increments(path: SampledPath, part: Partition) -> np.ndarray:
    return np.diff(path.values[part.indices], axis=0)


# -- quadratic variation ------------------------------------------------------


def qv_step(path: SampledPath, part: Partition) -> StepMatrixFunction:
    """Cumulative sum of outer products of partition increments.

    The (i, j) entry is the polarised covariation of coordinates i and j.
    """
    dw = increments(path, part)
    outer = np.einsum("ni,nj->nij", dw, dw)
    vals = np.zeros((part.indices.size, path.dim, path.dim))
    np.cumsum(outer, axis=0, out=vals[1:])
    return StepMatrixFunction(part.times, vals)


def qv_total(path: SampledPath, part: Partition) -> np.ndarray:
    """[omega]_pi(T) as a d x d matrix, reduced pairwise."""
    dw = increments(path, part)
    return np.sum(np.einsum("ni,nj->nij", dw, dw), axis=0)


def quadratic_variation(path: SampledPath, seq: PartitionSequence) -> Dict[int, StepMatrixFunction]:
    return {n: qv_step(path, part) for n, part in seq}


def covariation(x: np.ndarray, y: np.ndarray, part: Partition) -> float:
    """Scalar cross sum  sum dx dy  over the cells of ``part``."""
    dx = np.diff(np.asarray(x)[part.indices])
    dy = np.diff(np.asarray(y)[part.indices])
    return float(np.sum(dx * dy))


# -- Riemann sums -------------------------------------------------------------


def approx_history(path: SampledPath, part: Partition) -> np.ndarray:
    """History seen by the integrand at t_i in the approximation-based sum.

    It is the step approximation omega^n before t_i.  The value at t_i itself
    is supplied separately as omega(t_i) (left limit of omega^n at t_i).
    """
    return piecewise_constant_values(path.values, part.indices)


def integrand_grad(F, path: SampledPath, part: Partition, variant: str) -> np.ndarray:
    left = part.indices[:-1]
    if variant == "along_path":
        return fn.jet(F, path, left, 1).grad
    if variant == "along_approx":
        return fn.jet(F, path, left, 1, history=approx_history(path, part)).grad
    raise ParameterError(f"unknown integral variant {variant!r}")


def riemann_sum(F, path: SampledPath, part: Partition, variant: str = "along_path",
                partial: bool = False, level: int = 0) -> IntegralEstimate:
    grad = integrand_grad(F, path, part, variant)
    terms = np.einsum("ni,ni->n", grad, increments(path, part))
    ps = None
    if partial:
        ps = np.zeros(part.indices.size)
        np.cumsum(terms, out=ps[1:])
    return IntegralEstimate(level, float(np.sum(terms)), variant, ps)


def follmer_integral(F, path: SampledPath, seq: PartitionSequence, variant: str = "along_path",
                     partial: bool = False) -> Dict[int, IntegralEstimate]:
    """Per-level non-anticipative Riemann sums of the vertical gradient."""
    return {n: riemann_sum(F, path, part, variant, partial, n) for n, part in seq}


# -- change of variable -------------------------------------------------------


def cov_terms(F, path: SampledPath, part: Partition) -> Dict[str, float]:
    idx = part.indices
    left = idx[:-1]
    j = fn.jet(F, path, left, 2, horizontal=True)
    dw = increments(path, part)
    dt = np.diff(idx) * path.dt
    lhs = fn.values_at(F, path, idx[-1:])[0] - fn.values_at(F, path, idx[:1])[0]
    return {
        "lhs": float(lhs),
        "time": float(np.sum(j.horiz * dt)),
        "second": 0.5 * float(np.sum(np.einsum("nij,ni,nj->n", j.hess, dw, dw))),
        "integral": float(np.sum(np.einsum("ni,ni->n", j.grad, dw))),
    }


def change_of_variable_residual(F, path: SampledPath, part: Partition) -> float:
    """|F(T) - F(0) - (time term + second-order term + Riemann sum)| at one level."""
    c = cov_terms(F, path, part)
    return abs(c["lhs"] - (c["time"] + c["second"] + c["integral"]))


# -- isometry -----------------------------------------------------------------


@dataclass
class IsometryLevel:
    level: int
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def rel_gap(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return self.gap / scale if scale > 0 else 0.0


def isometry_level(F, path: SampledPath, part: Partition, level: int = 0) -> IsometryLevel:
    """lhs = sum (dF)^2,  rhs = sum <grad F^T grad F, dw dw^T> at left points."""
    idx = part.indices
    v = fn.values_at(F, path, idx)
    grad = fn.jet(F, path, idx[:-1], 1).grad
    dw = increments(path, part)
    lhs = float(np.sum(np.diff(v) ** 2))
    rhs = float(np.sum(np.einsum("ni,ni->n", grad, dw) ** 2))
    return IsometryLevel(level, lhs, rhs)


def isometry_gap(F, path: SampledPath, seq: PartitionSequence) -> Dict[int, IsometryLevel]:
    return {n: isometry_level(F, path, part, n) for n, part in seq}


def isometry_gap_from_remainders(F, path: SampledPath, part: Partition) -> float:
    """lhs - rhs rebuilt as  sum (2 grad F . dw R_i + R_i^2)  from first-order remainders."""
    idx = part.indices
    v = fn.values_at(F, path, idx)
    grad = fn.jet(F, path, idx[:-1], 1).grad
    lin = np.einsum("ni,ni->n", grad, increments(path, part))
    R = np.diff(v) - lin
    return float(np.sum(R * (2 * lin + R)))


# -- remainders ---------------------------------------------------------------


def _scale_lags(path: SampledPath, scales: Sequence[int]) -> List[int]:
    lags = []
    for j in scales:
        lag = path.M >> int(j)
        if lag < 1 or (lag << int(j)) != path.M:
            raise ParameterError(f"scale 2^-{j} is not a dyadic multiple of the grid step")
        lags.append(lag)
    return lags


def _sample_pairs(path: SampledPath, lag: int, count: int, rng) -> np.ndarray:
    return rng.integers(0, path.M - lag + 1, size=count)


def remainder_values(F, path: SampledPath, k: np.ndarray, lag: int) -> np.ndarray:
    """|R^F_{t,s}| = |F(s) - F(t) - grad F(t) . (omega(s) - omega(t))| with s = t + lag."""
    jt = fn.jet(F, path, k, 1)
    vs = fn.values_at(F, path, k + lag)
    dw = path.values[k + lag] - path.values[k]
    return np.abs(vs - jt.value - np.einsum("ni,ni->n", jt.grad, dw))


def remainder_samples(F, path: SampledPath, scales: Sequence[int], count: int = 256,
                      seed: int = 0) -> List[RemainderSample]:
    """Sample first-order remainders at dyadic scales ``T 2^-j`` for j in ``scales``."""
    if count < 16:
        raise ParameterError("need at least 16 samples per scale")
    rng = make_rng(seed)
    out = []
    for lag in _scale_lags(path, scales):
        k = _sample_pairs(path, lag, count, rng)
        r = remainder_values(F, path, k, lag)
        out.extend(RemainderSample(float(a * path.dt), float((a + lag) * path.dt), float(v))
                   for a, v in zip(k, r))
    return out


def horizontal_cumulative(F, path: SampledPath) -> np.ndarray:
    """Left sums of the horizontal derivative on the master grid, from 0 to each t_k."""
    h = fn.jet(F, path, np.arange(path.M), 0, horizontal=True).horiz
    cum = np.zeros(path.M + 1)
    np.cumsum(h * path.dt, out=cum[1:])
    return cum


def expansion_values(F, path: SampledPath, k: np.ndarray, lag: int,
                     time_cum: Optional[np.ndarray] = None) -> np.ndarray:
    """Residual after the first-order, time-integral and second-order terms.

    The time integral of the horizontal derivative over [t, s] is a left sum
    on the master grid.
    """
    if time_cum is None:
        time_cum = horizontal_cumulative(F, path)
    jt = fn.jet(F, path, k, 2)
    vs = fn.values_at(F, path, k + lag)
    dw = path.values[k + lag] - path.values[k]
    time_term = time_cum[k + lag] - time_cum[k]
    second = 0.5 * np.einsum("nij,ni,nj->n", jt.hess, dw, dw)
    return np.abs(vs - jt.value - np.einsum("ni,ni->n", jt.grad, dw) - time_term - second)


def expansion_samples(F, path: SampledPath, scales: Sequence[int], count: int = 256,
                      seed: int = 0) -> List[RemainderSample]:
    if count < 16:
        raise ParameterError("need at least 16 samples per scale")
    fn._require(F, 3)
    rng = make_rng(seed)
    time_cum = horizontal_cumulative(F, path)
    out = []
    for lag in _scale_lags(path, scales):
        k = _sample_pairs(path, lag, count, rng)
        r = expansion_values(F, path, k, lag, time_cum)
        out.extend(RemainderSample(float(a * path.dt), float((a + lag) * path.dt), float(v))
                   for a, v in zip(k, r))
    return out


def remainder_exponent_fit(samples: Sequence[RemainderSample]) -> ExponentFit:
    """Slope of log max |R| per scale against log scale."""
    by_scale: Dict[float, float] = {}
    for smp in samples:
        by_scale[smp.scale] = max(by_scale.get(smp.scale, 0.0), smp.value)
    scales = sorted(by_scale, reverse=True)
    maxima = [by_scale[s] for s in scales]
    if all(m < ZERO_REMAINDER for m in maxima):
        return ExponentFit(float("inf"), 1.0, scales, maxima)
    use = [(s, m) for s, m in zip(scales, maxima) if m >= ZERO_REMAINDER]
    if len(use) < 2:
        raise ParameterError("need at least two scales with non-zero remainders")
    x = np.log([s for s, _ in use])
    y = np.log([m for _, m in use])
    slope, icpt = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - slope * x - icpt) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return ExponentFit(float(slope), r2, scales, maxima)


def expansion_residual(F, path: SampledPath, scales: Sequence[int], count: int = 256,
                       seed: int = 0) -> ExponentFit:
    return remainder_exponent_fit(expansion_samples(F, path, scales, count, seed))


# -- rough-smooth decomposition -----------------------------------------------


@dataclass
class Decomposition:
    level: int
    times: np.ndarray
    phi: np.ndarray
    rough: np.ndarray
    smooth: np.ndarray
    target: np.ndarray
    qv_target: float
    qv_smooth: float
    irregular: bool

    @property
    def qv_ratio(self) -> float:
        if self.qv_target == 0:
            return 0.0 if self.qv_smooth == 0 else float("inf")
        return self.qv_smooth / self.qv_target


def strictly_increasing_qv(path: SampledPath, part: Partition) -> bool:
    """Every cell of ``part`` carries a positive QV increment."""
    dw = increments(path, part)
    return bool(np.all(np.sum(dw * dw, axis=1) > 0))


def decompose_level(F, base: SampledPath, part: Partition, level: int = 0,
                    irregular: Optional[bool] = None) -> Decomposition:
    """Split omega(t) = F(t, base_t) into a rough integral and a smooth part.

    rough(t_k) = sum_{i<k} grad F(t_i) . d base_i;
    smooth(t_k) = F(0) + sum_{i<k} (DF(t_i) dt_i + 1/2 <hess F(t_i), d base_i d base_i^T>).
    """
    idx = part.indices
    left = idx[:-1]
    j = fn.jet(F, base, left, 2, horizontal=True)
    dw = increments(base, part)
    dt = np.diff(idx) * base.dt
    rough = np.zeros(idx.size)
    np.cumsum(np.einsum("ni,ni->n", j.grad, dw), out=rough[1:])
    drift = j.horiz * dt + 0.5 * np.einsum("nij,ni,nj->n", j.hess, dw, dw)
    smooth = np.empty(idx.size)
    smooth[0] = fn.values_at(F, base, idx[:1])[0]
    np.cumsum(drift, out=smooth[1:])
    smooth[1:] += smooth[0]
    target = fn.values_at(F, base, idx)
    if irregular is None:
        irregular = strictly_increasing_qv(base, part)
    return Decomposition(level, part.times, j.grad, rough, smooth, target,
                         float(np.sum(np.diff(target) ** 2)), float(np.sum(np.diff(smooth) ** 2)),
                         irregular)


def rough_smooth_decompose(F, base: SampledPath, seq: PartitionSequence) -> Dict[int, Decomposition]:
    """Per-level decompositions; irregularity is checked at the finest level."""
    irregular = strictly_increasing_qv(base, seq.finest)
    return {n: decompose_level(F, base, part, n, irregular) for n, part in seq}


# -- Ito isometry -------------------------------------------------------------


@dataclass
class MonteCarloIsometry:
    mean_lhs: float
    mean_rhs: float
    stderr_lhs: float
    stderr_rhs: float
    seeds: int

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.stderr_lhs, self.stderr_rhs))

    @property
    def discrepancy(self) -> float:
        return abs(self.mean_lhs - self.mean_rhs)


def _ito_one(F, seed: int, level: int, M: int, T: float, dim: int):
    path = generate_brownian(dim, T, M, seed)
    part = Partition(np.arange(0, M + 1, M >> level), M, T)
    grad = fn.jet(F, path, part.indices[:-1], 1).grad
    integral = float(np.sum(np.einsum("ni,ni->n", grad, increments(path, part))))
    dt = np.diff(part.indices) * path.dt
    return integral ** 2, float(np.sum(np.sum(grad * grad, axis=1) * dt))


def ito_isometry_mc(F, seeds: Sequence[int], level: int, M: int = 2 ** 20, T: float = 1.0,
                    dim: int = 1, workers: int = 1) -> MonteCarloIsometry:
    """Mean of (Riemann sum)^2 against mean of sum |grad F|^2 dt over Brownian seeds."""
    if len(seeds) < 50:
        raise ParameterError("need at least 50 seeds")
    if M % (2 ** level):
        raise ParameterError(f"2^{level} does not divide M={M}")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            res = list(pool.map(lambda s: _ito_one(F, s, level, M, T, dim), seeds))
    else:
        res = [_ito_one(F, s, level, M, T, dim) for s in seeds]
    lhs = np.array([r[0] for r in res])
    rhs = np.array([r[1] for r in res])
    n = len(seeds)
    return MonteCarloIsometry(float(np.mean(lhs)), float(np.mean(rhs)),
                              float(np.std(lhs, ddof=1) / np.sqrt(n)),
                              float(np.std(rhs, ddof=1) / np.sqrt(n)), n)
