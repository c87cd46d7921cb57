"""Signed distance transforms and the average-pooling boundary band.

Sign convention: foreground voxels carry +distance to the nearest
background voxel (so every inside voxel is >= +1), background voxels carry
-distance to the nearest foreground voxel. There is no zero level set on the
voxel grid, which keeps boundary foreground voxels in the inner (w1) case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .volume import LabelMap


@dataclass(frozen=True, eq=False)
class DistanceMap:
    data: np.ndarray
    units: str = "voxel"
    metric: str = "euclidean"


@dataclass(frozen=True, eq=False)
class BoundaryBand:
    inner: np.ndarray  # bool, band voxels with y = 1
    outer: np.ndarray  # bool, band voxels with y = 0
    kernel_size: int

    @property
    def half_width(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def band(self) -> np.ndarray:
        return self.inner | self.outer


@dataclass(frozen=True, eq=False)
class WeightMap:
    data: np.ndarray
    params: tuple  # (w1, w2, w_c, K)


def _mask(label) -> np.ndarray:
    data = label.data if isinstance(label, LabelMap) else np.asarray(label)
    return data.astype(bool)


def signed_distance_exact(label, metric: str = "euclidean", units: str = "voxel",
                          spacing=None, empty_value: float | None = None) -> DistanceMap:
    """Exact signed distance, positive inside.

    ``units="mm"`` scales by voxel spacing and is only defined for the
    Euclidean metric. If one class is absent the sign of that class cannot be
    assigned; pass ``empty_value`` to get an unsigned fallback where every
    voxel is set to ``+empty_value`` (all foreground) or ``-empty_value``
    (all background).
    """
    mask = _mask(label)
    if min(mask.shape) < 2:
        raise ValueError("label must be at least 2 voxels along every axis")
    if metric not in ("euclidean", "chebyshev"):
        raise ValueError(f"unknown metric {metric!r}")
    if units not in ("voxel", "mm"):
        raise ValueError(f"unknown units {units!r}")
    if units == "mm" and metric != "euclidean":
        raise ValueError("mm units are only supported for the euclidean metric")

    n_fg = int(mask.sum())
    if n_fg == 0 or n_fg == mask.size:
        if empty_value is None:
            absent = "foreground" if n_fg == 0 else "background"
            raise ValueError(f"label has no {absent}; signed distance undefined")
        sign = 1.0 if n_fg else -1.0
        return DistanceMap(np.full(mask.shape, sign * float(empty_value)), units, metric)

    if metric == "euclidean":
        if units == "mm":
            if spacing is None:
                spacing = label.spacing if isinstance(label, LabelMap) else (1.0, 1.0, 1.0)
            sampling = tuple(float(s) for s in spacing)
        else:
            sampling = None
        inside = ndimage.distance_transform_edt(mask, sampling=sampling)
        outside = ndimage.distance_transform_edt(~mask, sampling=sampling)
    else:
        inside = ndimage.distance_transform_cdt(mask, metric="chessboard").astype(np.float64)
        outside = ndimage.distance_transform_cdt(~mask, metric="chessboard").astype(np.float64)
    return DistanceMap(np.where(mask, inside, -outside), units, metric)


def box_sum(mask: np.ndarray, kernel_size: int) -> np.ndarray:
    """Integer K x K x K box sum with stride 1 and zero padding (same shape)."""
    r = (kernel_size - 1) // 2
    total = np.pad(mask.astype(np.int64), r, mode="constant")
    for axis, n in enumerate(mask.shape):
        c = np.cumsum(total, axis=axis)
        c = np.concatenate([np.zeros_like(c.take([0], axis=axis)), c], axis=axis)
        total = c.take(np.arange(kernel_size, kernel_size + n), axis=axis) - c.take(
            np.arange(n), axis=axis
        )
    return total


def _check_kernel(kernel_size: int) -> int:
    k = int(kernel_size)
    if k != kernel_size or k < 3 or k % 2 == 0:
        raise ValueError(f"kernel size must be an odd integer >= 3, got {kernel_size}")
    return k


def boundary_band_conv(label, kernel_size: int) -> BoundaryBand:
    """Band of voxels whose K^3 average-pooled label lies strictly in (0, 1).

    Equivalent to Chebyshev distance <= (K-1)/2 from the opposite class away
    from the grid edge; zero padding treats out-of-grid voxels as background.
    """
    k = _check_kernel(kernel_size)
    mask = _mask(label)
    counts = box_sum(mask, k)
    band = (counts > 0) & (counts < k**3)
    return BoundaryBand(band & mask, band & ~mask, k)


def weight_map(label, kernel_size: int = 11, w1: float = 1.0, w2: float = 40.0,
               wc: float = 1.0) -> WeightMap:
    """Per-voxel loss weights w_c + w_delta: w1 on the inner band, w2 on the outer band."""
    if min(w1, w2, wc) < 0:
        raise ValueError("weights must be nonnegative")
    band = boundary_band_conv(label, kernel_size)
    data = np.full(band.inner.shape, float(wc))
    data[band.inner] += w1
    data[band.outer] += w2
    return WeightMap(data, (w1, w2, wc, band.kernel_size))


def weight_map_torch(labels: torch.Tensor, kernel_size: int = 11, w1: float = 1.0,
                     w2: float = 40.0, wc: float = 1.0) -> torch.Tensor:
    """Batched weight maps via ``avg_pool3d``; ``labels`` is (B, H, W, D) in {0, 1}.

    Pooled means are rescaled to integer counts before the (0, K^3) test so
    the result matches :func:`weight_map` exactly.
    """
    k = _check_kernel(kernel_size)
    y = labels.to(torch.float64).unsqueeze(1)
    # explicit zero padding: avg_pool3d refuses inputs smaller than the kernel
    y = F.pad(y, ((k - 1) // 2,) * 6)
    pooled = F.avg_pool3d(y, k, stride=1)
    counts = torch.round(pooled * k**3).squeeze(1)
    band = (counts > 0) & (counts < k**3)
    fg = labels > 0.5
    out = torch.full(labels.shape, float(wc), dtype=torch.float64, device=labels.device)
    out = out + w1 * (band & fg) + w2 * (band & ~fg)
    return out
