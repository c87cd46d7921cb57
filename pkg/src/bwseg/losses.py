"""Segmentation objectives benchmarked against each other.

All per-voxel losses accept an optional weight map (w_c + w_delta) that is
multiplied in before the mean reduction; without it they are the plain
unweighted losses. Inputs are torch tensors whose last three dims are
spatial; leading dims are treated as batch. Gradients come from autograd.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .boundary import DistanceMap, WeightMap, signed_distance_exact, weight_map_torch
from .model import foreground_probability, heaviside
from .volume import LabelMap, Volume

EPS_LOG = 1e-7

COMPONENTS = ("CE", "BW-CE", "Dice", "Focal", "BW-Focal", "SDT", "BW-SDT", "HD", "Shape")
SDT_COMPONENTS = ("SDT", "BW-SDT", "Shape")
TABLE_ROWS = (
    "BW-CE", "CE", "Dice", "BW-CE+Dice", "CE+Dice", "BW-Focal", "BW-Focal+Dice",
    "Focal+Dice", "BW-SDT", "SDT", "HD+Dice", "Shape+Dice",
)


def _reduce(per_voxel: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_voxel.mean()
    if reduction == "none":
        return per_voxel
    raise ValueError(f"unknown reduction {reduction!r}")


def _check(pred: torch.Tensor, target: torch.Tensor, weights=None):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if weights is not None and weights.shape != pred.shape:
        raise ValueError(f"shape mismatch: weights {tuple(weights.shape)} vs prediction {tuple(pred.shape)}")


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor | None:
    if x is None:
        return None
    if isinstance(x, (LabelMap, Volume, WeightMap, DistanceMap)):
        x = x.data
    if isinstance(x, torch.Tensor):
        return x.to(dtype=like.dtype, device=like.device)
    return torch.as_tensor(np.asarray(x), dtype=like.dtype, device=like.device)


def ce_loss(pred, label, weights=None, eps: float = EPS_LOG, reduction: str = "mean"):
    """Binary cross-entropy on foreground probabilities, optionally weighted."""
    y = _as_tensor(label, pred)
    w = _as_tensor(weights, pred)
    _check(pred, y, w)
    p = pred.clamp(eps, 1 - eps)
    per_voxel = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    if w is not None:
        per_voxel = per_voxel * w
    return _reduce(per_voxel, reduction)


def focal_loss(pred, label, alpha: float = 0.5, gamma: float = 2.0, weights=None,
               eps: float = EPS_LOG, reduction: str = "mean"):
    y = _as_tensor(label, pred)
    w = _as_tensor(weights, pred)
    _check(pred, y, w)
    p = pred.clamp(eps, 1 - eps)
    p_t = y * p + (1 - y) * (1 - p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    per_voxel = -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)
    if w is not None:
        per_voxel = per_voxel * w
    return _reduce(per_voxel, reduction)


def soft_dice_loss(pred, label, eps: float = 1.0):
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps), per volume, averaged over the batch."""
    y = _as_tensor(label, pred)
    _check(pred, y)
    dims = (-3, -2, -1)
    inter = (pred * y).sum(dim=dims)
    denom = pred.sum(dim=dims) + y.sum(dim=dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def sdt_loss(pred_sdt, gt_sdt, weights=None, reduction: str = "mean"):
    g = _as_tensor(gt_sdt, pred_sdt)
    w = _as_tensor(weights, pred_sdt)
    _check(pred_sdt, g, w)
    per_voxel = (pred_sdt - g) ** 2
    if w is not None:
        per_voxel = per_voxel * w
    return _reduce(per_voxel, reduction)


def unsigned_distance(mask: np.ndarray) -> np.ndarray:
    """|signed distance| in voxels; grid diagonal when a class is absent."""
    mask = np.asarray(mask).astype(bool)
    diagonal = math.sqrt(sum(n * n for n in mask.shape))
    return np.abs(signed_distance_exact(mask, empty_value=diagonal).data)


def hausdorff_distance_maps(pred, label, threshold: float = 0.5):
    """(d_y, d_p) unsigned distance maps of the label and the binarized prediction.

    Computed outside the autograd graph; batched inputs are handled per volume.
    """
    p = pred.detach().cpu().numpy() >= threshold
    y = _as_tensor(label, pred).detach().cpu().numpy() > 0.5
    spatial = p.shape[-3:]
    flat_p = p.reshape(-1, *spatial)
    flat_y = y.reshape(-1, *spatial)
    d_y = np.stack([unsigned_distance(m) for m in flat_y]).reshape(p.shape)
    d_p = np.stack([unsigned_distance(m) for m in flat_p]).reshape(p.shape)
    return d_y, d_p


def soft_hausdorff_loss(pred, label, alpha: float = 2.0, distances=None, reduction: str = "mean"):
    """Mean of (p - y)^2 (d_y^alpha + d_p^alpha).

    The distance maps are treated as constants; supply ``distances`` to
    reuse precomputed maps, otherwise they are recomputed from the 0.5
    thresholded prediction.
    """
    y = _as_tensor(label, pred)
    _check(pred, y)
    if distances is None:
        distances = hausdorff_distance_maps(pred, y)
    d_y, d_p = (_as_tensor(d, pred) for d in distances)
    per_voxel = (pred - y) ** 2 * (d_y**alpha + d_p**alpha)
    return _reduce(per_voxel, reduction)


def shape_loss(pred_sdt, gt_sdt, scale: float = 1.0, reduction: str = "mean"):
    """Squared difference of Heaviside-normalized distance maps."""
    g = _as_tensor(gt_sdt, pred_sdt)
    _check(pred_sdt, g)
    per_voxel = (heaviside(pred_sdt, scale) - heaviside(g, scale)) ** 2
    return _reduce(per_voxel, reduction)


def combine(components: Iterable[tuple[torch.Tensor, float]]) -> torch.Tensor:
    """Weighted sum of loss values; the gradient is the same weighted sum."""
    components = list(components)
    if not components:
        raise ValueError("combine needs at least one component")
    total = None
    for value, weight in components:
        term = value * weight
        total = term if total is None else total + term
    return total


# -- configured objectives ---------------------------------------------------


@dataclass
class LossConfig:
    name: str = "BW-CE"
    weights: dict = field(default_factory=dict)
    kernel_size: int = 11
    w1: float = 1.0
    w2: float = 40.0
    wc: float = 1.0
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    dice_eps: float = 1.0
    sdt_clamp: float = 10.0
    hd_alpha: float = 2.0
    shape_scale: float = 1.0

    def __post_init__(self):
        comps = self.components
        for c in comps:
            if c not in COMPONENTS:
                raise ValueError(f"unknown loss component {c!r} in {self.name!r}")
        if len(set(comps)) != len(comps):
            raise ValueError(f"duplicate component in {self.name!r}")
        unknown = set(self.weights) - set(comps)
        if unknown:
            raise ValueError(f"weights given for components not in {self.name!r}: {sorted(unknown)}")
        if not any(self.weight(c) > 0 for c in comps):
            raise ValueError("at least one loss component needs a positive weight")

    @property
    def components(self) -> list[str]:
        return [c.strip() for c in self.name.split("+") if c.strip()]

    def weight(self, component: str) -> float:
        return float(self.weights.get(component, 1.0))

    @property
    def mode(self) -> str:
        """'sdt' when the network must regress a signed distance, else 'probability'."""
        return "sdt" if any(c in SDT_COMPONENTS for c in self.components) else "probability"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | str) -> "LossConfig":
        if isinstance(d, str):
            return cls(name=d)
        return cls(**d)


def clamped_sdt(labels: np.ndarray, clamp: float) -> np.ndarray:
    """Euclidean voxel-unit SDT per volume, clamped to [-clamp, clamp]."""
    labels = np.asarray(labels)
    spatial = labels.shape[-3:]
    out = [
        np.clip(signed_distance_exact(m > 0.5, empty_value=clamp).data, -clamp, clamp)
        for m in labels.reshape(-1, *spatial)
    ]
    return np.stack(out).reshape(labels.shape)


class Objective:
    """Evaluates a :class:`LossConfig` on raw network output.

    ``output`` is (B, 2, ...) logits in probability mode or (B, 1, ...)
    signed distances in sdt mode; ``labels`` is (B, ...) in {0, 1}.
    """

    def __init__(self, config: LossConfig):
        self.config = config

    @property
    def mode(self) -> str:
        return self.config.mode

    def __call__(self, output: torch.Tensor, labels: torch.Tensor, gt_sdt=None):
        cfg = self.config
        comps = cfg.components
        labels = labels.to(output.dtype)
        weights = None
        if any(c.startswith("BW-") for c in comps):
            weights = weight_map_torch(labels, cfg.kernel_size, cfg.w1, cfg.w2, cfg.wc).to(output.dtype)
        prob = foreground_probability(output, self.mode, cfg.shape_scale)
        sdt = output[:, 0] if self.mode == "sdt" else None
        if sdt is not None and gt_sdt is None:
            gt_sdt = clamped_sdt(labels.detach().cpu().numpy(), cfg.sdt_clamp)
        if gt_sdt is not None:
            gt_sdt = _as_tensor(gt_sdt, output)

        values = {}
        for c in comps:
            if c == "CE":
                v = ce_loss(prob, labels)
            elif c == "BW-CE":
                v = ce_loss(prob, labels, weights)
            elif c == "Focal":
                v = focal_loss(prob, labels, cfg.focal_alpha, cfg.focal_gamma)
            elif c == "BW-Focal":
                v = focal_loss(prob, labels, cfg.focal_alpha, cfg.focal_gamma, weights)
            elif c == "Dice":
                v = soft_dice_loss(prob, labels, cfg.dice_eps)
            elif c == "HD":
                v = soft_hausdorff_loss(prob, labels, cfg.hd_alpha)
            elif c == "SDT":
                v = sdt_loss(sdt, gt_sdt)
            elif c == "BW-SDT":
                v = sdt_loss(sdt, gt_sdt, weights)
            elif c == "Shape":
                v = shape_loss(sdt, gt_sdt, cfg.shape_scale)
            values[c] = v
        total = combine((values[c], cfg.weight(c)) for c in comps)
        return total, {c: float(v.detach()) for c, v in values.items()}


def parse_loss_list(text: str | Sequence[str]) -> list[LossConfig]:
    names = text.split(",") if isinstance(text, str) else list(text)
    return [LossConfig(name=n.strip()) for n in names if n.strip()]
