"""Desk-scale synthetic hyperspectral tasks with brute-force-computable optima.

Classification: every class shares one smooth base spectrum except on the
informative bands, where class ``c`` is shifted by ``separation * code[c, j]``
on informative band ``j``. Codes are binary words chosen greedily for Hamming
distance. With 4 classes on 3 informative bands this is the parity code: one
informative band only splits the classes in two, any two identify the class,
and the third adds margin. The exhaustive table therefore has a graded
structure rather than a flat plateau.

Reconstruction: pixel spectra are non-negative mixtures of ``rank`` smooth
Gaussian-bump basis spectra.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .hsi import BandCombination, HsiCube, LabelMap, check_bc

DEFAULT_WAVELENGTHS = (400.0, 700.0)


@dataclass(frozen=True)
class SynthConfig:
    num_bands: int = 16
    side: int = 32
    num_classes: int = 4
    rank: int = 3
    n_informative: int = 3
    informative: tuple[int, ...] | None = None
    noise: float = 0.05
    separation_sigmas: float = 4.0
    min_separation: float = 0.1
    tile: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_bands < 2:
            raise ValueError("num_bands must be at least 2")
        if self.side < 1:
            raise ValueError("side must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.informative is not None:
            check_bc(self.informative, self.num_bands)
        size = len(self.informative) if self.informative is not None else self.n_informative
        if not 1 <= size < self.num_bands:
            raise ValueError(f"informative subset size must be in [1, {self.num_bands}), got {size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.num_classes > 2**size:
            raise ValueError(
                f"{self.num_classes} classes cannot get distinct codes on {size} informative bands"
            )
        if not 1 <= self.rank < self.num_bands:
            raise ValueError(f"rank must be in [1, {self.num_bands})")
        if self.tile < 1:
            raise ValueError("tile must be positive")

    @property
    def separation(self) -> float:
        return max(self.separation_sigmas * self.noise, self.min_separation)


def wavelength_grid(num_bands: int) -> np.ndarray:
    return np.linspace(*DEFAULT_WAVELENGTHS, num_bands)


def class_codes(num_classes: int, length: int) -> np.ndarray:
    """Binary code book, one word per class, with a large minimum Hamming distance.

    Two classes get the all-zero and all-one words. Up to ``2**(length - 1)``
    classes are drawn from the even-weight words (pairwise distance >= 2), so
    dropping any one informative band still leaves the classes distinct. The
    rest is filled greedily by max-min distance.
    """
    words = np.array(list(itertools.product((0, 1), repeat=length)), dtype=np.int8)
    if num_classes <= 2:
        return words[[0, len(words) - 1]][:num_classes]
    if num_classes <= 2 ** (length - 1):
        words = words[words.sum(axis=1) % 2 == 0]
    chosen = [0]
    while len(chosen) < num_classes:
        dist = np.min(np.abs(words[:, None, :] - words[chosen][None, :, :]).sum(axis=2), axis=1)
        dist[chosen] = -1
        chosen.append(int(np.argmax(dist)))
    return words[chosen]


def _informative(cfg: SynthConfig, rng: np.random.Generator) -> BandCombination:
    if cfg.informative is not None:
        return tuple(cfg.informative)
    return tuple(sorted(int(b) for b in rng.choice(cfg.num_bands, cfg.n_informative, replace=False)))


def _tile_labels(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    tiles = -(-cfg.side // cfg.tile)
    per_tile = rng.integers(1, cfg.num_classes + 1, size=(tiles, tiles))
    # every class must occur at least once
    flat = per_tile.ravel()
    flat[: cfg.num_classes] = rng.permutation(np.arange(1, cfg.num_classes + 1))
    per_tile = rng.permutation(flat).reshape(tiles, tiles)
    full = np.kron(per_tile, np.ones((cfg.tile, cfg.tile), dtype=np.int64))
    return full[: cfg.side, : cfg.side]


def gen_synth_classification(cfg: SynthConfig) -> tuple[HsiCube, LabelMap, BandCombination]:
    """Cube, label map and the informative band set for a synthetic land-cover task."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    informative = _informative(cfg, rng)
    n = cfg.num_bands
    x = np.linspace(0.0, 1.0, n)
    phase = rng.uniform(0, 2 * np.pi)
    base = 0.35 + 0.12 * np.sin(2 * np.pi * 0.8 * x + phase)

    codes = class_codes(cfg.num_classes, len(informative))
    signatures = np.tile(base, (cfg.num_classes, 1))
    signatures[:, list(informative)] += cfg.separation * codes

    labels = _tile_labels(cfg, rng)
    noise = rng.normal(0.0, 1.0, size=(n, cfg.side, cfg.side)) * cfg.noise
    values = signatures[labels - 1].transpose(2, 0, 1) + noise
    values = np.clip(values, 0.0, 1.0).astype(np.float32)
    cube = HsiCube(values, wavelength_grid(n))
    return cube, LabelMap(labels, cfg.num_classes), informative


def basis_spectra(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """``rank`` strictly positive Gaussian-bump spectra with peaks spread over the range."""
    n = cfg.num_bands
    x = np.arange(n, dtype=np.float64)
    edges = np.linspace(0, n - 1, cfg.rank + 1)
    centers = rng.uniform(edges[:-1], edges[1:])
    widths = rng.uniform(0.04, 0.07, size=cfg.rank) * n
    basis = 0.05 + np.exp(-0.5 * ((x[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    return basis / basis.max(axis=1, keepdims=True)


def gen_synth_reconstruction(cfg: SynthConfig) -> HsiCube:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    basis = basis_spectra(cfg, rng)
    side = cfg.side
    # smooth abundance maps: sums of a few random low-frequency cosines, kept non-negative
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    abund = np.empty((cfg.rank, side, side))
    for d in range(cfg.rank):
        field = np.zeros((side, side))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 2.5, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            field += np.cos(2 * np.pi * (fx * xx + fy * yy) + ph)
        abund[d] = 0.5 + field / 6.0 + 0.1 * rng.uniform(size=(side, side))
    abund = np.clip(abund, 0.0, None) / cfg.rank * 0.9
    clean = np.einsum("dhw,dn->nhw", abund, basis)
    values = clean + rng.normal(0.0, 1.0, size=clean.shape) * cfg.noise
    values = np.clip(values, 0.0, 1.0).astype(np.float32)
    return HsiCube(values, wavelength_grid(cfg.num_bands))
