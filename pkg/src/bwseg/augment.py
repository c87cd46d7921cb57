"""Training-time augmentation on (image, label) pairs.

Spatial transforms share one geometric map between image (trilinear) and
label (nearest neighbour); intensity transforms never touch the label.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .volume import LabelMap, Volume


@dataclass(frozen=True, eq=False)
class Sample:
    image: Volume
    label: LabelMap

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} shapes differ")


@dataclass
class AugmentConfig:
    max_translation: float = 10.0  # voxels
    max_rotation: float = 22.0  # degrees, per axis
    flip_axes: tuple = (0, 1, 2)
    noise_sigma: float = 0.25
    control_points: int = 5
    max_displacement: float = 10.0  # voxels
    global_shift: float = 0.25  # fraction
    placenta_shift: float = 0.15  # normalized intensity units
    p_affine: float = 0.5
    p_elastic: float = 0.5
    p_noise: float = 0.5
    p_global: float = 0.5
    p_placenta: float = 0.5

    def __post_init__(self):
        self.flip_axes = tuple(int(a) for a in self.flip_axes)
        magnitudes = (self.max_translation, self.max_rotation, self.noise_sigma,
                      self.max_displacement, self.global_shift, self.placenta_shift)
        if min(magnitudes) < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        for p in (self.p_affine, self.p_elastic, self.p_noise, self.p_global, self.p_placenta):
            if not 0 <= p <= 1:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.control_points < 2:
            raise ValueError("need at least 2 control points per axis")

    def scaled(self, factor: float) -> "AugmentConfig":
        """Copy with voxel-valued magnitudes scaled, e.g. for smaller grids."""
        return replace(self, max_translation=self.max_translation * factor,
                       max_displacement=self.max_displacement * factor)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_affine=0, p_elastic=0, p_noise=0, p_global=0, p_placenta=0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flip_axes"] = list(self.flip_axes)
        return d


def rotation_matrix(angles_deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def affine_warp(sample: Sample, rotation_deg=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0),
                flips=()) -> Sample:
    """Apply x -> R F (x - c) + c + t about the grid center c.

    Out-of-grid samples are filled with 0 in both image and label.
    """
    shape = np.array(sample.image.shape)
    flip = np.ones(3)
    flip[list(flips)] = -1
    forward = rotation_matrix(rotation_deg) @ np.diag(flip)
    if np.array_equal(forward, np.eye(3)) and not np.any(translation):
        return sample
    center = (shape - 1) / 2.0
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ (center + np.asarray(translation, dtype=float))
    image = ndimage.affine_transform(np.asarray(sample.image.data, dtype=np.float64), inverse,
                                     offset, order=1, mode="constant", cval=0.0)
    label = ndimage.affine_transform(sample.label.data, inverse, offset, order=0,
                                     mode="constant", cval=0)
    return Sample(sample.image.with_data(image.astype(sample.image.data.dtype, copy=False)),
                  LabelMap(label, sample.label.spacing, sample.label.affine))


def random_affine(sample: Sample, rng: np.random.Generator,
                  config: AugmentConfig | None = None) -> Sample:
    config = config or AugmentConfig()
    angles = rng.uniform(-config.max_rotation, config.max_rotation, 3)
    shift = rng.uniform(-config.max_translation, config.max_translation, 3)
    flips = [a for a in config.flip_axes if rng.random() < 0.5]
    return affine_warp(sample, angles, shift, flips)


def dense_field(control: np.ndarray, shape) -> np.ndarray:
    """Linearly interpolate a (3, c, c, c) control displacement grid to (3, *shape).

    Linear interpolation keeps every component within the control extremes.
    """
    c = control.shape[1:]
    coords = np.meshgrid(*[np.linspace(0, ci - 1, n) for ci, n in zip(c, shape)], indexing="ij")
    return np.stack([ndimage.map_coordinates(comp, coords, order=1, mode="nearest")
                     for comp in control])


def warp(sample: Sample, field: np.ndarray) -> Sample:
    """Resample with out(x) = in(x + u(x))."""
    grid = np.indices(sample.image.shape, dtype=np.float64)
    coords = grid + field
    image = ndimage.map_coordinates(np.asarray(sample.image.data, dtype=np.float64), coords,
                                    order=1, mode="nearest")
    label = ndimage.map_coordinates(sample.label.data, coords, order=0, mode="constant", cval=0)
    return Sample(sample.image.with_data(image.astype(sample.image.data.dtype, copy=False)),
                  LabelMap(label, sample.label.spacing, sample.label.affine))


def elastic_deform(sample: Sample, rng: np.random.Generator,
                   config: AugmentConfig | None = None) -> Sample:
    config = config or AugmentConfig()
    n = config.control_points
    if min(sample.image.shape) < n:
        raise ValueError("grid smaller than the control-point grid")
    control = rng.uniform(-config.max_displacement, config.max_displacement, (3, n, n, n))
    if config.max_displacement == 0:
        return sample
    return warp(sample, dense_field(control, sample.image.shape))


def gaussian_noise(sample: Sample, rng: np.random.Generator,
                   config: AugmentConfig | None = None) -> Sample:
    config = config or AugmentConfig()
    if config.noise_sigma == 0:
        return sample
    data = np.asarray(sample.image.data, dtype=np.float64)
    noisy = data + rng.normal(0.0, config.noise_sigma, data.shape)
    return Sample(sample.image.with_data(noisy.astype(sample.image.data.dtype, copy=False)),
                  sample.label)


def scale_intensity(sample: Sample, factor: float) -> Sample:
    data = np.asarray(sample.image.data, dtype=np.float64) * factor
    return Sample(sample.image.with_data(data.astype(sample.image.data.dtype, copy=False)),
                  sample.label)


def intensity_shift_global(sample: Sample, rng: np.random.Generator,
                           config: AugmentConfig | None = None) -> Sample:
    """Multiply the whole image by (1 + u), u ~ U[-global_shift, global_shift]."""
    config = config or AugmentConfig()
    u = rng.uniform(-config.global_shift, config.global_shift)
    return scale_intensity(sample, 1.0 + u)


def shift_placenta(sample: Sample, shift: float) -> Sample:
    data = np.asarray(sample.image.data, dtype=np.float64)
    data = data + shift * sample.label.data
    return Sample(sample.image.with_data(data.astype(sample.image.data.dtype, copy=False)),
                  sample.label)


def intensity_shift_placenta(sample: Sample, rng: np.random.Generator,
                             config: AugmentConfig | None = None) -> Sample:
    """Additive constant shift inside the label, mimicking an oxygenation change."""
    config = config or AugmentConfig()
    s = rng.uniform(-config.placenta_shift, config.placenta_shift)
    return shift_placenta(sample, s)


_PIPELINE = (
    ("p_affine", random_affine),
    ("p_elastic", elastic_deform),
    ("p_noise", gaussian_noise),
    ("p_global", intensity_shift_global),
    ("p_placenta", intensity_shift_placenta),
)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Spatial (affine, elastic) then intensity (noise, global, placenta) transforms,
    each applied with its configured probability."""
    for prob_name, transform in _PIPELINE:
        if rng.random() < getattr(config, prob_name):
            sample = transform(sample, rng, config)
    return sample
