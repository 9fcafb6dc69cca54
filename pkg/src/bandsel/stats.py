"""Unsupervised band statistics (entropy, spectral angle) and their BC averages."""

from __future__ import annotations

import csv
import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .hsi import HsiCube, check_bc, format_bc

ENTROPY_BINS = 256


def _band(cube: HsiCube, band: int) -> np.ndarray:
    if not 0 <= band < cube.num_bands:
        raise IndexError(f"band {band} out of range for {cube.num_bands} bands")
    return cube.values[band].ravel().astype(np.float64)


def entropy_of(values: np.ndarray, bins: int = ENTROPY_BINS) -> float:
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p))) + 0.0


def band_entropy(cube: HsiCube, band: int) -> float:
    """Shannon entropy in bits of one band, 256 uniform bins over [0, 1]."""
    return entropy_of(_band(cube, band))


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(min(1.0, max(-1.0, cos)))


def sam(cube: HsiCube, i: int, j: int) -> float:
    """Spectral angle in radians between two flattened band images."""
    a, b = _band(cube, i), _band(cube, j)
    for idx, v in ((i, a), (j, b)):
        if not np.any(v):
            raise ValueError(f"band {idx} has zero norm; spectral angle undefined")
    if i == j:
        return 0.0
    return _angle(a, b)


def bc_entropy(cube: HsiCube, bc: Sequence[int]) -> float:
    bc = check_bc(bc, cube.num_bands)
    return float(np.mean([band_entropy(cube, b) for b in bc]))


def bc_sam(cube: HsiCube, bc: Sequence[int]) -> float:
    bc = check_bc(bc, cube.num_bands)
    if len(bc) < 2:
        raise ValueError("SAM of a band combination needs at least two bands")
    return float(np.mean([sam(cube, i, j) for i, j in itertools.combinations(bc, 2)]))


@dataclass(frozen=True, eq=False)
class BandStats:
    """Per-band entropy and the full pairwise SAM matrix, computed once per cube."""

    entropy: np.ndarray
    sam: np.ndarray

    @classmethod
    def of(cls, cube: HsiCube) -> BandStats:
        flat = cube.values.reshape(cube.num_bands, -1).astype(np.float64)
        norms = np.linalg.norm(flat, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ValueError(f"band {int(zero[0])} has zero norm; spectral angle undefined")
        cos = (flat @ flat.T) / np.outer(norms, norms)
        angles = np.arccos(np.clip(cos, -1.0, 1.0))
        np.fill_diagonal(angles, 0.0)
        angles = (angles + angles.T) / 2
        ent = np.array([entropy_of(row) for row in flat])
        return cls(ent, angles)

    def bc_entropy(self, bc: Sequence[int]) -> float:
        return float(np.mean(self.entropy[list(bc)]))

    def bc_sam(self, bc: Sequence[int]) -> float:
        if len(bc) < 2:
            raise ValueError("SAM of a band combination needs at least two bands")
        return float(np.mean([self.sam[i, j] for i, j in itertools.combinations(bc, 2)]))


@dataclass(frozen=True)
class ScatterRow:
    bands: tuple[int, ...]
    entropy_bits: float
    sam_rad: float
    metric: float
    is_top: bool


def stats_scatter(cube: HsiCube, bcs, bench, metric: str | None = None, top_frac: float = 0.05):
    """Entropy/SAM/metric rows per BC, sorted best first, top fraction flagged."""
    from .bench import query, sort_best_first

    metric = metric or bench.task.primary_metric
    if not 0.0 <= top_frac <= 1.0:
        raise ValueError("top_frac must lie in [0, 1]")
    bcs = [tuple(bc) for bc in bcs]
    missing = [bc for bc in bcs if bc not in bench]
    if missing:
        raise KeyError(f"band combinations missing from table: {[format_bc(b) for b in missing]}")
    stats = BandStats.of(cube)
    values = {bc: query(bench, bc)[metric] for bc in bcs}
    ordered = sort_best_first(values, bench.task.higher_is_better(metric))
    n_top = math.floor(top_frac * len(ordered) + 1e-9)
    return [
        ScatterRow(
            bc,
            stats.bc_entropy(bc),
            stats.bc_sam(bc) if len(bc) > 1 else 0.0,
            values[bc],
            rank < n_top,
        )
        for rank, bc in enumerate(ordered)
    ]


def write_scatter_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bands", "entropy_bits", "sam_rad", "metric", "is_top"])
        for r in rows:
            writer.writerow(
                [format_bc(r.bands), repr(r.entropy_bits), repr(r.sam_rad), repr(r.metric), int(r.is_top)]
            )
