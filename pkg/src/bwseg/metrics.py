"""Overlap, surface-distance and BOLD-signal evaluation measures."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LabelMap, Volume


def _mask(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, (LabelMap, Volume)) else x).astype(bool)


def _pair(a, b):
    a, b = _mask(a), _mask(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """Dice overlap in percent. Two empty masks score 100, one empty mask 0."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(a, b).sum()) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_mask(label) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour in the background.

    Voxels on the grid edge count as surface (outside is background).
    """
    m = _mask(label)
    eroded = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return m & ~eroded


def surface_voxels(label) -> np.ndarray:
    """(N, 3) integer coordinates of surface voxels in lexicographic order."""
    return np.argwhere(surface_mask(label))


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Concatenation of both directed surface-to-surface distance sets, in mm."""
    a, b = _pair(a, b)
    pa = surface_voxels(a) * np.asarray(spacing, dtype=float)
    pb = surface_voxels(b) * np.asarray(spacing, dtype=float)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("empty surface: surface distances are undefined for an empty mask")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def _spacing_of(a, spacing):
    if spacing is not None:
        return spacing
    return a.spacing if isinstance(a, LabelMap) else (1.0, 1.0, 1.0)


def hd95(a, b, spacing=None) -> float:
    """95th percentile (linear interpolation) of the pooled directed distances, mm."""
    return float(np.percentile(surface_distances(a, b, _spacing_of(a, spacing)), 95))


def assd(a, b, spacing=None) -> float:
    """Average symmetric surface distance, mm."""
    return float(np.mean(surface_distances(a, b, _spacing_of(a, spacing))))


def mean_in_mask(volume, mask) -> float:
    data = np.asarray(volume.data if isinstance(volume, Volume) else volume, dtype=np.float64)
    m = _mask(mask)
    if data.shape != m.shape:
        raise ValueError(f"shape mismatch: {data.shape} vs {m.shape}")
    if not m.any():
        return float("nan")
    return float(data[m].mean())


def bold_error(volume, gt, pred) -> float:
    """100 |b_pred - b_gt| / b_gt; NaN when the prediction is empty."""
    gt_m, pred_m = _pair(gt, pred)
    if not gt_m.any():
        raise ValueError("ground-truth mask is empty")
    b = mean_in_mask(volume, gt_m)
    if b == 0:
        raise ValueError("mean signal in the ground truth is zero")
    if not pred_m.any():
        return float("nan")
    return 100.0 * abs(mean_in_mask(volume, pred_m) - b) / b


def oxygenation_consistency(m_norm: float, m_hyper: float) -> float:
    return abs(float(m_norm) - float(m_hyper))


def oxygenation_consistency_summary(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Mean and sample std of |m_normoxia - m_hyperoxia| across subjects."""
    diffs = np.array([oxygenation_consistency(n, h) for n, h in pairs], dtype=float)
    if diffs.size == 0:
        raise ValueError("no subjects with labels in both phases")
    std = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    return float(diffs.mean()), std


def consecutive_dice(masks: Sequence) -> list[float]:
    if len(masks) < 2:
        raise ValueError("need at least two masks")
    return [dice(a, b) for a, b in zip(masks[:-1], masks[1:])]


def evaluate_pair(image, gt, pred, spacing=None) -> dict:
    """Dice, HD95, ASSD and BOLD error for one frame; surface metrics are NaN
    when either mask is empty."""
    spacing = _spacing_of(gt, spacing)
    row = {"dice": dice(gt, pred)}
    try:
        dists = surface_distances(gt, pred, spacing)
        row["hd95_mm"] = float(np.percentile(dists, 95))
        row["assd_mm"] = float(dists.mean())
    except ValueError:
        row["hd95_mm"] = row["assd_mm"] = float("nan")
    row["bold_error_pct"] = bold_error(image, gt, pred)
    return row
