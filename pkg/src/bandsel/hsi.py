"""Hyperspectral data model and the BSSC/BSSL binary file formats.

Cubes are stored band-major: ``values[b]`` is the H x W image of band ``b``.
Band combinations are plain tuples of strictly increasing band indices, so they
hash, sort lexicographically and compare for equality without a wrapper type.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BandCombination = tuple[int, ...]

CUBE_MAGIC = b"BSSC"
LABEL_MAGIC = b"BSSL"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Raised when a cube or label file is malformed."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    primary_metric: str
    metric_directions: dict[str, str] = field(hash=False)

    @property
    def metrics(self) -> tuple[str, ...]:
        return tuple(self.metric_directions)

    def higher_is_better(self, metric: str) -> bool:
        try:
            return self.metric_directions[metric] == "higher"
        except KeyError:
            raise KeyError(f"metric {metric!r} not defined for task {self.kind!r}") from None


CLASSIFICATION = TaskSpec(
    "classification", "OA", {"OA": "higher", "AA": "higher", "Kappa": "higher"}
)
RECONSTRUCTION = TaskSpec("reconstruction", "PSNR", {"MRAE": "lower", "PSNR": "higher"})

TASKS = {t.kind: t for t in (CLASSIFICATION, RECONSTRUCTION)}


def task_spec(kind: str) -> TaskSpec:
    aliases = {"cls": "classification", "rec": "reconstruction"}
    kind = aliases.get(kind, kind)
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}; expected one of {sorted(TASKS)}")
    return TASKS[kind]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HsiCube:
    """An H x W x N reflectance volume stored as ``values[N, H, W]`` (float32).

    ``normalized`` is set when the loader had to min-max rescale the data.
    Range and finiteness of the values are enforced by the I/O layer and the
    generators, not by the constructor, so a bad cube can still be built and
    rejected at save time.
    """

    values: np.ndarray
    wavelengths: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"values must be (N, H, W), got shape {values.shape}")
        if wl.shape != (values.shape[0],):
            raise ValueError(
                f"expected {values.shape[0]} wavelengths, got {wl.shape[0] if wl.ndim else 0}"
            )
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "wavelengths", _readonly(wl))

    @property
    def num_bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def pixels(self) -> np.ndarray:
        """Pixel spectra as an (H*W, N) float64 matrix, row-major over space."""
        return self.values.reshape(self.num_bands, -1).T.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, HsiCube):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.wavelengths, other.wavelengths)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids (uint16); 0 marks background and is ignored by metrics."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"labels must be (H, W), got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes}]")
        if not np.any(labels > 0):
            raise ValueError("label map has no non-background pixel")
        object.__setattr__(self, "labels", _readonly(labels.astype(np.uint16)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(
            self.labels, other.labels
        )

    __hash__ = None


def check_bc(indices: Sequence[int], num_bands: int) -> BandCombination:
    """Validate and return a band combination as a tuple of ints."""
    bc = tuple(int(i) for i in indices)
    if not bc:
        raise ValueError("band combination must contain at least one band")
    if any(b < 0 or b >= num_bands for b in bc):
        raise IndexError(f"band combination {bc} out of range for {num_bands} bands")
    if any(a >= b for a, b in zip(bc, bc[1:])):
        raise ValueError(f"band combination {bc} is not strictly increasing")
    return bc


def format_bc(bc: Sequence[int]) -> str:
    return "-".join(str(b) for b in bc)


def parse_bc(text: str) -> BandCombination:
    parts = text.replace(",", "-").split("-")
    try:
        return tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ValueError(f"cannot parse band combination {text!r}") from None


def select_bands(cube: HsiCube, bc: Sequence[int]) -> HsiCube:
    bc = check_bc(bc, cube.num_bands)
    idx = list(bc)
    return HsiCube(cube.values[idx], cube.wavelengths[idx], cube.normalized)


def _check_values(values: np.ndarray, what) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what}: cube contains non-finite values")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError(f"{what}: cube values outside [0, 1]")


def save_cube(cube: HsiCube, path) -> None:
    _check_values(cube.values, path)
    n, h, w = cube.values.shape
    payload = b"".join(
        [
            _HEADER.pack(CUBE_MAGIC, FORMAT_VERSION, h, w, n),
            cube.wavelengths.astype("<f8").tobytes(),
            cube.values.astype("<f4").tobytes(order="C"),
        ]
    )
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write cube to {path}: {exc.strerror}") from exc


def _read_header(path, data: bytes, magic: bytes) -> tuple[int, int, int]:
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(path, 0, f"bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < _HEADER.size:
        raise FormatError(path, len(data), "truncated header")
    _, version, h, w, n = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    return h, w, n


def load_cube(path) -> HsiCube:
    """Read a BSSC file; out-of-range data is min-max rescaled into [0, 1]."""
    data = Path(path).read_bytes()
    h, w, n = _read_header(path, data, CUBE_MAGIC)
    off = _HEADER.size
    wl_end = off + 8 * n
    if len(data) < wl_end:
        raise FormatError(path, len(data), f"truncated wavelengths: need {n} f64 values")
    wavelengths = np.frombuffer(data, dtype="<f8", count=n, offset=off)
    count = h * w * n
    end = wl_end + 4 * count
    if len(data) < end:
        raise FormatError(path, len(data), f"truncated values: need {count} f32 values")
    if len(data) > end:
        raise FormatError(path, end, "trailing bytes after values")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=wl_end).reshape(n, h, w)
    if not np.all(np.isfinite(values)):
        raise FormatError(path, wl_end, "non-finite values")
    normalized = False
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        lo, hi = float(values.min()), float(values.max())
        values = ((values.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
        values = np.clip(values, 0.0, 1.0)
        normalized = True
    return HsiCube(values, wavelengths, normalized)


def save_labels(labels: LabelMap, path) -> None:
    h, w = labels.labels.shape
    payload = _HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, h, w, labels.num_classes)
    payload += labels.labels.astype("<u2").tobytes(order="C")
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write labels to {path}: {exc.strerror}") from exc


def load_labels(path) -> LabelMap:
    data = Path(path).read_bytes()
    h, w, num_classes = _read_header(path, data, LABEL_MAGIC)
    end = _HEADER.size + 2 * h * w
    if len(data) < end:
        raise FormatError(path, len(data), f"truncated labels: need {h * w} u16 values")
    if len(data) > end:
        raise FormatError(path, end, "trailing bytes after labels")
    labels = np.frombuffer(data, dtype="<u2", count=h * w, offset=_HEADER.size)
    try:
        return LabelMap(labels.reshape(h, w), num_classes)
    except ValueError as exc:
        raise FormatError(path, _HEADER.size, str(exc)) from exc


U64_MAX = 2**64 - 1


def count_combinations(n: int, k: int) -> int:
    """Exact binomial coefficient C(n, k), restricted to the unsigned 64-bit range."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    value = math.comb(n, k)
    if value > U64_MAX:
        raise OverflowError(f"C({n}, {k}) exceeds the 64-bit count range")
    return value


def unrank_combination(rank: int, n: int, k: int) -> BandCombination:
    """The ``rank``-th k-subset of range(n) in lexicographic order."""
    total = math.comb(n, k)
    if not 0 <= rank < total:
        raise IndexError(f"rank {rank} out of range for C({n}, {k}) = {total}")
    out = []
    start = 0
    for slot in range(k):
        remaining = k - slot - 1
        for b in range(start, n):
            block = math.comb(n - b - 1, remaining)
            if rank < block:
                out.append(b)
                start = b + 1
                break
            rank -= block
    return tuple(out)


def rank_combination(bc: Sequence[int], n: int) -> int:
    k = len(bc)
    rank = 0
    start = 0
    for slot, b in enumerate(bc):
        remaining = k - slot - 1
        for skipped in range(start, b):
            rank += math.comb(n - skipped - 1, remaining)
        start = b + 1
    return rank
