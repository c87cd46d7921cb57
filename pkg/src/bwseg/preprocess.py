"""Intensity normalization, interleave splitting, resampling and shape standardization."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import Volume, crop_or_pad

DEFAULT_SHAPE = (112, 112, 80)


def normalize_percentile(volume: Volume, p: float = 90) -> Volume:
    """Divide by the p-th percentile of all voxels, background included.

    No clipping or thresholding is applied.
    """
    data = np.asarray(volume.data, dtype=np.float64)
    q = float(np.percentile(data, p))
    if not q > 0:
        raise ValueError(f"{p}th percentile is {q}; cannot normalize a degenerate volume")
    out = data / q
    if np.issubdtype(volume.data.dtype, np.floating) and volume.data.dtype != np.float64:
        out = out.astype(volume.data.dtype)
    return volume.with_data(out)


def _check_axis(volume: Volume, axis: int) -> int:
    if not -3 <= axis < 3:
        raise ValueError(f"axis {axis} out of range for a 3D volume")
    return axis % 3


def deinterleave(volume: Volume, axis: int = 2) -> tuple[Volume, Volume]:
    """Split an interleaved acquisition into (even slices, odd slices).

    Slice spacing along ``axis`` doubles in both halves.
    """
    axis = _check_axis(volume, axis)
    if volume.shape[axis] < 2:
        raise ValueError("need at least two slices to deinterleave")
    spacing = list(volume.spacing)
    spacing[axis] *= 2
    halves = []
    for start in (0, 1):
        index = [slice(None)] * 3
        index[axis] = slice(start, None, 2)
        affine = None
        if volume.affine is not None:
            affine = np.array(volume.affine, dtype=float)
            step = np.zeros(3)
            step[axis] = start
            affine[:3, 3] += affine[:3, :3] @ step
            affine[:3, axis] *= 2
        halves.append(Volume(volume.data[tuple(index)], spacing, affine))
    return halves[0], halves[1]


def interleave(even: Volume, odd: Volume, axis: int = 2) -> Volume:
    """Inverse of :func:`deinterleave`."""
    axis = _check_axis(even, axis)
    n_even, n_odd = even.shape[axis], odd.shape[axis]
    if n_even not in (n_odd, n_odd + 1):
        raise ValueError("even half must have as many or one more slices than the odd half")
    shape = list(even.shape)
    shape[axis] = n_even + n_odd
    data = np.empty(shape, dtype=np.result_type(even.data, odd.data))
    for start, half in ((0, even), (1, odd)):
        index = [slice(None)] * 3
        index[axis] = slice(start, None, 2)
        data[tuple(index)] = half.data
    spacing = list(even.spacing)
    spacing[axis] /= 2
    affine = None
    if even.affine is not None:
        affine = np.array(even.affine, dtype=float)
        affine[:3, axis] /= 2
    return Volume(data, spacing, affine)


def resample_linear(volume: Volume, target_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling onto ``target_spacing`` covering the same extent.

    Output size per axis is ``round((n - 1) * s / s_new) + 1`` so the first
    and last voxel centers are preserved; samples beyond the input are
    clamped to the edge.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(s > 0 for s in target):
        raise ValueError(f"target spacing must be three positive values, got {target}")
    if np.allclose(target, volume.spacing, rtol=0, atol=1e-12):
        return volume.with_data(volume.data, spacing=target)
    ratio = [t / s for t, s in zip(target, volume.spacing)]
    shape = [int(round((n - 1) / r)) + 1 for n, r in zip(volume.shape, ratio)]
    coords = np.meshgrid(*[np.arange(n) * r for n, r in zip(shape, ratio)], indexing="ij")
    data = ndimage.map_coordinates(
        np.asarray(volume.data, dtype=np.float64), coords, order=1, mode="nearest"
    )
    affine = None
    if volume.affine is not None:
        affine = np.array(volume.affine, dtype=float)
        affine[:3, :3] = affine[:3, :3] @ np.diag(ratio)
    return Volume(data, target, affine)


def standard_pipeline(volume: Volume, target_shape: Sequence[int] = DEFAULT_SHAPE,
                      percentile: float = 90) -> Volume:
    """Percentile normalization followed by centered crop/pad."""
    target_shape = tuple(int(s) for s in target_shape)
    if any(s % 16 for s in target_shape):
        raise ValueError(f"target shape {target_shape} must be divisible by 16")
    return crop_or_pad(normalize_percentile(volume, percentile), target_shape)
