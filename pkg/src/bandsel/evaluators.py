"""Evaluators map ``(band combination, seed)`` to a metric dict.

Three flavors exist: lookups into a benchmark table (:class:`TableEvaluator`),
live training of a small model on the selected bands (the classes below), and
supernet inference (``bandsel.scos.SupernetEvaluator``).
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Protocol

import numpy as np

from .hsi import CLASSIFICATION, RECONSTRUCTION, HsiCube, LabelMap, TaskSpec, check_bc
from .metrics import classification_metrics, mrae, psnr


class Evaluator(Protocol):
    task: TaskSpec
    dataset_id: str
    backbone_id: str

    def __call__(self, bc: Sequence[int], seed: int = 0) -> dict[str, float]: ...


def split_indices(n: int, train_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic random train/validation split of ``range(n)``."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    cut = min(max(cut, 1), n - 1)
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def nearest_centroid(x_train, y_train, x_test, classes) -> np.ndarray:
    centroids = np.stack([x_train[y_train == c].mean(axis=0) for c in classes])
    d = ((x_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.asarray(classes)[np.argmin(d, axis=1)]


def ridge_classifier(x_train, y_train, x_test, classes, lam: float = 1.0) -> np.ndarray:
    """One-vs-rest ridge regression on +-1 targets with an unpenalized intercept."""
    classes = np.asarray(classes)
    targets = np.where(y_train[:, None] == classes[None, :], 1.0, -1.0)
    mu_x, mu_y = x_train.mean(axis=0), targets.mean(axis=0)
    xc = x_train - mu_x
    coef = np.linalg.solve(xc.T @ xc + lam * np.eye(x_train.shape[1]), xc.T @ (targets - mu_y))
    scores = (x_test - mu_x) @ coef + mu_y
    return classes[np.argmax(scores, axis=1)]


class LiveClassificationEvaluator:
    """Fits nearest-centroid or a ridge classifier on the selected bands per call.

    ``seed`` selects the random pixel split; background pixels are dropped.
    """

    task = CLASSIFICATION
    models = ("centroid", "ridge")

    def __init__(
        self,
        cube: HsiCube,
        labels: LabelMap,
        model: str = "centroid",
        train_frac: float = 0.5,
        dataset_id: str = "synthetic",
        ridge_lambda: float = 1.0,
    ):
        if model not in self.models:
            raise ValueError(f"unknown model {model!r}; expected one of {self.models}")
        if (labels.height, labels.width) != (cube.height, cube.width):
            raise ValueError("label map and cube spatial sizes differ")
        self.cube = cube
        self.labels = labels
        self.model = model
        self.train_frac = train_frac
        self.ridge_lambda = ridge_lambda
        self.dataset_id = dataset_id
        self.backbone_id = model
        flat = labels.labels.ravel()
        self._pixels = np.flatnonzero(flat > 0)
        self._y = flat[self._pixels].astype(np.int64)
        self._x = cube.pixels()[self._pixels]
        self._classes = np.unique(self._y)
        self._splits: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def split(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        if seed not in self._splits:
            self._splits[seed] = split_indices(len(self._y), self.train_frac, seed)
        return self._splits[seed]

    def __call__(self, bc: Sequence[int], seed: int = 0) -> dict[str, float]:
        bc = check_bc(bc, self.cube.num_bands)
        tr, va = self.split(seed)
        x = self._x[:, list(bc)]
        # classes absent from the training split cannot be predicted
        classes = [c for c in self._classes if np.any(self._y[tr] == c)]
        if self.model == "centroid":
            pred = nearest_centroid(x[tr], self._y[tr], x[va], classes)
        else:
            pred = ridge_classifier(x[tr], self._y[tr], x[va], classes, self.ridge_lambda)
        return classification_metrics(pred, self._y[va], self.labels.num_classes)


class LiveReconstructionEvaluator:
    """Least-squares regression from the selected bands (plus bias) to full spectra."""

    task = RECONSTRUCTION

    def __init__(self, cube: HsiCube, train_frac: float = 0.5, dataset_id: str = "synthetic"):
        self.cube = cube
        self.train_frac = train_frac
        self.dataset_id = dataset_id
        self.backbone_id = "lstsq"
        self._x = cube.pixels()

    def reconstruct(self, bc: Sequence[int], train: np.ndarray, test: np.ndarray) -> np.ndarray:
        design = np.hstack([self._x[:, list(bc)], np.ones((self._x.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(design[train], self._x[train], rcond=None)
        return design[test] @ coef

    def __call__(self, bc: Sequence[int], seed: int = 0) -> dict[str, float]:
        bc = check_bc(bc, self.cube.num_bands)
        tr, va = split_indices(self._x.shape[0], self.train_frac, seed)
        rec = self.reconstruct(bc, tr, va)
        ref = self._x[va]
        return {"MRAE": mrae(rec, ref), "PSNR": psnr(rec, ref)}


class TableEvaluator:
    """Benchmark lookup: returns seed-averaged metrics, or one seed's when ``per_seed``."""

    def __init__(self, table, per_seed: bool = False):
        self.table = table
        self.task = table.task
        self.per_seed = per_seed
        keys = list(table.records)
        self.dataset_id = keys[0].dataset_id if keys else ""
        self.backbone_id = keys[0].backbone_id if keys else ""

    def __call__(self, bc: Sequence[int], seed: int = 0) -> dict[str, float]:
        from .bench import query

        if self.per_seed:
            record = self.table.record(tuple(bc))
            if seed in record.seeds:
                return dict(record.seeds[seed])
        return query(self.table, tuple(bc))


def live_evaluator(task: str, cube: HsiCube, labels: LabelMap | None = None, backbone: str | None = None, **kw):
    if task in ("classification", "cls"):
        if labels is None:
            raise ValueError("classification needs a label map")
        return LiveClassificationEvaluator(cube, labels, model=backbone or "centroid", **kw)
    if task in ("reconstruction", "rec"):
        if backbone not in (None, "lstsq"):
            raise ValueError(f"unknown reconstruction backbone {backbone!r}")
        return LiveReconstructionEvaluator(cube, **kw)
    raise ValueError(f"unknown task {task!r}")
