"""Reconstruction and classification metrics."""

from __future__ import annotations

import math

import numpy as np

MRAE_EPS = 1e-8


def _pair(reconstructed, reference) -> tuple[np.ndarray, np.ndarray]:
    rec = np.asarray(reconstructed, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if rec.shape != ref.shape:
        raise ValueError(f"shape mismatch: {rec.shape} vs {ref.shape}")
    return rec, ref


def mrae(reconstructed, reference, eps: float = MRAE_EPS) -> float:
    """Mean relative absolute error, |rec - ref| / (ref + eps) averaged over entries."""
    rec, ref = _pair(reconstructed, reference)
    if np.any(ref < 0):
        raise ValueError("reference must be non-negative")
    return float(np.mean(np.abs(rec - ref) / (ref + eps)))


def psnr(reconstructed, reference) -> float:
    """PSNR in dB with peak 1.0; +inf when the inputs are identical."""
    rec, ref = _pair(reconstructed, reference)
    mse = float(np.mean((rec - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def confusion_matrix(predicted, reference, num_classes: int) -> np.ndarray:
    """Counts[true, pred] over classes 0..num_classes, background rows dropped."""
    pred = np.asarray(predicted).ravel().astype(np.int64)
    ref = np.asarray(reference).ravel().astype(np.int64)
    mask = ref > 0
    size = num_classes + 1
    cm = np.bincount(ref[mask] * size + pred[mask], minlength=size * size)
    return cm.reshape(size, size)


def classification_metrics(predicted, reference, num_classes: int | None = None) -> dict[str, float]:
    """OA, AA and Cohen's kappa over non-background reference pixels.

    ``reference`` may be a LabelMap or an array of class ids. A prediction of 0
    on a labelled pixel counts as an error.
    """
    if hasattr(reference, "labels"):
        num_classes = reference.num_classes if num_classes is None else num_classes
        reference = reference.labels
    pred = np.asarray(predicted)
    ref = np.asarray(reference)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if not np.any(ref > 0):
        raise ValueError("no non-background pixels in reference")
    if num_classes is None:
        num_classes = int(max(ref.max(), pred.max()))
    num_classes = max(num_classes, int(pred.max()))

    cm = confusion_matrix(pred, ref, num_classes).astype(np.float64)
    total = cm.sum()
    p_o = np.trace(cm) / total
    rows = cm.sum(axis=1)
    present = rows > 0
    recalls = np.diag(cm)[present] / rows[present]
    p_e = float(np.sum(rows * cm.sum(axis=0)) / total**2)
    if p_e == 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return {"OA": float(p_o), "AA": float(recalls.mean()), "Kappa": float(kappa)}
