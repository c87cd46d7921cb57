"""Whole-volume prediction, island removal and time-series sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from scipy import ndimage

from .model import UNet3D, foreground_probability, output_mode
from .volume import LabelMap, TimeSeries, Volume

log = logging.getLogger(__name__)

_RANK = {6: 1, 18: 2, 26: 3}


def largest_component(label, connectivity: int = 26) -> LabelMap:
    """Keep the largest connected foreground component.

    Ties go to the component containing the lexicographically smallest voxel.
    """
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    lab = label if isinstance(label, LabelMap) else LabelMap(np.asarray(label).astype(bool))
    mask = lab.mask
    if not mask.any():
        return lab
    components, n = ndimage.label(mask, ndimage.generate_binary_structure(3, _RANK[connectivity]))
    if n == 1:
        return lab
    sizes = np.bincount(components.ravel())
    sizes[0] = 0
    best = np.flatnonzero(sizes == sizes.max())
    # raster-scan labelling numbers components by their first voxel, but be explicit
    first = ndimage.minimum(np.arange(mask.size).reshape(mask.shape), components, best)
    keep = best[int(np.argmin(first))]
    return LabelMap((components == keep).astype(np.uint8), lab.spacing, lab.affine)


def segment_probability(prob: np.ndarray, threshold: float = 0.5, connectivity: int = 26,
                        spacing=(1.0, 1.0, 1.0), affine=None) -> LabelMap:
    """Threshold (>=) a foreground probability map and keep the largest component."""
    mask = np.asarray(prob) >= threshold
    return largest_component(LabelMap(mask, spacing, affine), connectivity)


@torch.no_grad()
def predict_probability(network: UNet3D, volumes, batch_size: int = 4) -> np.ndarray:
    """Foreground probabilities for one volume (H, W, D) or a stack (N, H, W, D)."""
    arrays = [np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float32)
              for v in (volumes if isinstance(volumes, (list, tuple)) else [volumes])]
    single = not isinstance(volumes, (list, tuple))
    stack = np.stack(arrays)
    was_training = network.training
    network.eval()
    mode = output_mode(network.config)
    out = []
    for i in range(0, len(stack), batch_size):
        x = torch.from_numpy(stack[i:i + batch_size]).unsqueeze(1)
        out.append(foreground_probability(network(x), mode).numpy())
    network.train(was_training)
    probs = np.concatenate(out)
    return probs[0] if single else probs


def predict(network: UNet3D, volume: Volume, threshold: float = 0.5,
            connectivity: int = 26) -> LabelMap:
    """Binary placenta mask for a preprocessed volume.

    An empty prediction is returned as an empty LabelMap and logged.
    """
    prob = predict_probability(network, volume)
    label = segment_probability(prob, threshold, connectivity, volume.spacing, volume.affine)
    if label.is_empty():
        log.warning("empty prediction: no voxel reached threshold %.3f", threshold)
    return label


@dataclass
class SeriesPrediction:
    masks: dict = field(default_factory=dict)  # frame index -> LabelMap
    empty_frames: list = field(default_factory=list)

    @property
    def indices(self) -> list[int]:
        return sorted(self.masks)


def predict_series(network: UNet3D, series: TimeSeries, stride: int = 2, threshold: float = 0.5,
                   connectivity: int = 26,
                   preprocess: Optional[Callable[[Volume], Volume]] = None,
                   batch_size: int = 4) -> SeriesPrediction:
    """Predict frames 0, stride, 2*stride, ... independently."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    indices = list(range(0, len(series), stride))
    frames = [series.frames[t] for t in indices]
    if preprocess is not None:
        frames = [preprocess(f) for f in frames]
    probs = predict_probability(network, frames, batch_size=batch_size)
    result = SeriesPrediction()
    for t, frame, prob in zip(indices, frames, probs):
        label = segment_probability(prob, threshold, connectivity, frame.spacing, frame.affine)
        result.masks[t] = label
        if label.is_empty():
            result.empty_frames.append(t)
            log.warning("empty prediction at frame %d of %s", t, series.subject_id or "series")
    return result
