"""Partitions of [0, T] made of master-grid indices.

Dyadic ladders are nested by construction (the flag is still verified).
Lebesgue partitions are built from the path itself: the next point is the
first grid time at which the path has moved at least ``base**-n`` away from
its value at the previous point.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np

from .paths import ParameterError, SampledPath, check_partition


@dataclass(frozen=True, eq=False)
class Partition:
    indices: np.ndarray
    M: int
    horizon: float = 1.0

    def __post_init__(self):
        idx = check_partition(self.indices, self.M)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def times(self) -> np.ndarray:
        return self.indices * (self.horizon / self.M)

    @property
    def cells(self) -> int:
        return self.indices.size - 1

    def __len__(self):
        return self.indices.size

    def issubset(self, other: "Partition") -> bool:
        return bool(np.all(np.isin(self.indices, other.indices, assume_unique=True)))


@dataclass
class PartitionSequence:
    levels: List[Tuple[int, Partition]]
    kind: str
    nested: bool = field(init=False)
    # Lebesgue sequences: level -> number of cells m(n); level -> threshold
    counts: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("uniform", "dyadic", "lebesgue"):
            raise ParameterError(f"unknown partition kind {self.kind!r}")
        self.levels = sorted(self.levels, key=lambda lv: lv[0])
        self.nested = check_nested(self.levels)

    def __iter__(self) -> Iterator[Tuple[int, Partition]]:
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, n: int) -> Partition:
        for level, part in self.levels:
            if level == n:
                return part
        raise KeyError(n)

    @property
    def ns(self) -> List[int]:
        return [n for n, _ in self.levels]

    @property
    def finest(self) -> Partition:
        return self.levels[-1][1]


def check_nested(levels) -> bool:
    return all(a.issubset(b) for (_, a), (_, b) in zip(levels, levels[1:]))


def uniform_partition(M: int, cells: int, T: float = 1.0) -> Partition:
    if cells < 1 or M % cells:
        raise ParameterError(f"{cells} cells do not divide the grid size {M}")
    return Partition(np.arange(0, M + 1, M // cells), M, T)


def dyadic_sequence(M: int, n_min: int, n_max: int, T: float = 1.0) -> PartitionSequence:
    """Level n holds the 2^n + 1 equally spaced grid indices."""
    if n_min < 0 or n_max < n_min:
        raise ParameterError(f"bad level range {n_min}:{n_max}")
    if M % (2 ** n_max):
        raise ParameterError(f"2^{n_max} does not divide M={M}")
    levels = [(n, uniform_partition(M, 2 ** n, T)) for n in range(n_min, n_max + 1)]
    return PartitionSequence(levels, "dyadic")


def uniform_sequence(M: int, cells: List[int], T: float = 1.0) -> PartitionSequence:
    levels = [(n, uniform_partition(M, c, T)) for n, c in enumerate(cells)]
    return PartitionSequence(levels, "uniform")


def _norms(d: np.ndarray) -> np.ndarray:
    if d.shape[1] == 1:
        return np.abs(d[:, 0])
    return np.sqrt(np.sum(d * d, axis=1))


def hitting_indices(values: np.ndarray, threshold: float) -> np.ndarray:
    """First-passage grid indices for moves of size ``threshold``, closed by M.

    Scans forward in windows that double until a crossing is found, so the
    cost is linear in M with a Python loop only over the partition points.
    """
    M = values.shape[0] - 1
    out = [0]
    k = 0
    window = 64
    while k < M:
        found = -1
        start = k + 1
        while start <= M:
            stop = min(start + window, M + 1)
            moved = _norms(values[start:stop] - values[k])
            hits = np.flatnonzero(moved >= threshold)
            if hits.size:
                found = start + int(hits[0])
                break
            start = stop
            window *= 2
        if found < 0:
            out.append(M)
            break
        # re-centre the window on the typical cell length seen so far
        window = max(16, 2 * (found - k))
        out.append(found)
        k = found
    return np.asarray(out, dtype=np.int64)


def lebesgue_partition(path: SampledPath, n: int, level_base: float = 2.0) -> Partition:
    return Partition(hitting_indices(path.values, float(level_base) ** (-n)), path.M, path.horizon)


def lebesgue_sequence(path: SampledPath, n_min: int, n_max: int, level_base: float = 2.0) -> PartitionSequence:
    """Hitting-time partitions of levels spaced ``level_base**-n``."""
    if n_max < n_min:
        raise ParameterError(f"bad level range {n_min}:{n_max}")
    if level_base <= 1:
        raise ParameterError("level_base must exceed 1")
    levels = []
    counts = {}
    thresholds = {}
    for n in range(n_min, n_max + 1):
        part = lebesgue_partition(path, n, level_base)
        levels.append((n, part))
        counts[n] = part.cells
        thresholds[n] = float(level_base) ** (-n)
    return PartitionSequence(levels, "lebesgue", counts=counts, thresholds=thresholds)


def mesh(part: Partition) -> float:
    return float(np.max(np.diff(part.indices))) * (part.horizon / part.M)


def cell_of_grid(part: Partition) -> np.ndarray:
    """For grid indices k = 1..M, the cell j with t_j < t_k <= t_{j+1}."""
    return np.searchsorted(part.indices, np.arange(1, part.M + 1), side="left") - 1


def oscillation(path: SampledPath, part: Partition) -> float:
    """max over cells of sup_{t in (t_j, t_{j+1}]} |f(t) - f(t_j)|."""
    if part.M != path.M:
        raise ParameterError("partition and path live on different grids")
    left = part.indices[cell_of_grid(part)]
    return float(np.max(_norms(path.values[1:] - path.values[left])))


def to_csv(seq: PartitionSequence) -> str:
    buf = io.StringIO()
    buf.write("n,k,grid_index,time\n")
    for n, part in seq:
        for k, (idx, t) in enumerate(zip(part.indices, part.times)):
            buf.write(f"{n},{k},{idx},{t!r}\n")
    return buf.getvalue()


def to_json(seq: PartitionSequence) -> dict:
    """Compact form: grid indices are stored as first index plus gaps."""
    return {
        "kind": seq.kind,
        "nested": seq.nested,
        "M": seq.levels[0][1].M if seq.levels else None,
        "horizon": seq.levels[0][1].horizon if seq.levels else None,
        "levels": [
            {"n": n, "points": len(part), "gaps": np.diff(part.indices).tolist()}
            for n, part in seq
        ],
    }


def from_json(obj: dict) -> PartitionSequence:
    M = obj["M"]
    T = obj["horizon"]
    levels = []
    for lv in obj["levels"]:
        idx = np.concatenate([[0], np.cumsum(lv["gaps"])]).astype(np.int64)
        levels.append((lv["n"], Partition(idx, M, T)))
    return PartitionSequence(levels, obj["kind"])
