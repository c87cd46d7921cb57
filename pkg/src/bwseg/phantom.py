"""Synthetic BOLD time series of thin, deforming, placenta-like shells.

Each subject is a spherical-cap shell (the placenta) wrapped around a
ball of similar intensity (the fetus) in textured background. Frames are
warped by a temporally correlated smooth displacement field and the shell
brightens by a factor (1 + A s(t)) following the normoxia / hyperoxia /
normoxia paradigm. Every frame carries its exact label.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .augment import dense_field
from .volume import LabelMap, SubjectRecord, TimeSeries, Volume, phases_from_lengths

COHORT_CYCLE = ("control", "FGR", "highBMI")


@dataclass
class PhantomConfig:
    grid: tuple = (64, 64, 64)
    spacing: tuple = (3.0, 3.0, 3.0)
    radius_range: tuple = (18.0, 24.0)  # outer shell radius, voxels
    thickness_range: tuple = (2.0, 4.0)
    extent_range: tuple = (60.0, 100.0)  # polar half-angle of the cap, degrees
    center_jitter: float = 2.0
    fetus_radius_frac: tuple = (0.85, 1.0)  # of the shell's inner radius
    background_mean: float = 0.5
    background_std: float = 0.15
    fetus_mean: float = 0.85
    fetus_std: float = 0.1
    placenta_mean: float = 1.0
    placenta_std: float = 0.05
    texture_smoothness: float = 2.0
    frames: int = 30
    phase_lengths: tuple = (10, 10, 10)
    hyperoxia_amplitude: float = 0.15
    ramp_time: int = 3
    motion_amplitude: float = 3.0  # hard bound on displacement norm, voxels
    motion_sigma: Optional[float] = None  # stationary per-component std; default amplitude / 2
    motion_rho: float = 0.95
    motion_control_points: int = 4
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.phase_lengths = tuple(int(n) for n in self.phase_lengths)
        if sum(self.phase_lengths) != self.frames:
            raise ValueError(f"phase lengths {self.phase_lengths} do not sum to {self.frames} frames")
        if min(self.thickness_range) < 1:
            raise ValueError("shell thickness must be >= 1 voxel")
        if min(self.hyperoxia_amplitude, self.motion_amplitude, self.noise_sigma,
               self.background_std, self.fetus_std, self.placenta_std) < 0:
            raise ValueError("amplitudes must be >= 0")
        if self.ramp_time < 1:
            raise ValueError("ramp_time must be >= 1 frame")

    @property
    def sigma(self) -> float:
        return self.motion_amplitude / 2 if self.motion_sigma is None else self.motion_sigma

    def noiseless(self) -> "PhantomConfig":
        """Copy without acquisition noise or tissue texture."""
        return replace(self, noise_sigma=0.0, background_std=0.0, fetus_std=0.0, placenta_std=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "PhantomConfig":
        """32^3 profile: radii and motion bound halved with the grid, shell thickness kept."""
        base = dict(grid=(32, 32, 32), radius_range=(9.0, 12.0), thickness_range=(2.5, 4.0),
                    center_jitter=1.5, motion_amplitude=1.5, texture_smoothness=1.5)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class ShellGeometry:
    center: np.ndarray
    axis: np.ndarray
    outer_radius: float
    thickness: float
    extent_deg: float
    fetus_radius: float


@dataclass(eq=False)
class PhantomTruth:
    geometry: ShellGeometry
    shape: LabelMap  # undeformed frame-0 label
    fetus: np.ndarray  # undeformed fetus mask
    control_fields: np.ndarray  # (T, 3, k, k, k) displacement control grids
    signal: np.ndarray  # oxygenation s(t) per frame
    motion_bound: float = math.inf

    def displacement(self, t: int, shape) -> np.ndarray:
        """Dense field applied at frame ``t``, after clamping."""
        return clamp_displacement(dense_field(self.control_fields[t], shape), self.motion_bound)


@dataclass(eq=False)
class PhantomSubject:
    series: TimeSeries
    truth: PhantomTruth
    record: SubjectRecord
    config: PhantomConfig = field(repr=False, default=None)


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def shell_mask(shape, center, axis, outer_radius, thickness, extent_deg) -> np.ndarray:
    """Voxels with R - thickness <= r <= R and polar angle <= extent from ``axis``."""
    grid = np.indices(shape, dtype=np.float64)
    rel = grid - np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    r = np.sqrt((rel**2).sum(axis=0))
    cos = np.tensordot(np.asarray(axis, dtype=float), rel, axes=1) / np.maximum(r, 1e-12)
    inside_cone = cos >= math.cos(math.radians(extent_deg)) - 1e-12
    inside_cone |= r == 0  # apex belongs to every cone
    return (r >= outer_radius - thickness) & (r <= outer_radius) & inside_cone


def _component_count(mask: np.ndarray) -> int:
    return ndimage.label(mask, ndimage.generate_binary_structure(3, 3))[1]


def make_placenta_shape(config: PhantomConfig, rng: np.random.Generator,
                        max_attempts: int = 10) -> tuple[LabelMap, ShellGeometry]:
    """Randomly oriented spherical-cap shell forming one 26-connected component."""
    lo, hi = config.radius_range
    widen = 0.0
    for _ in range(max_attempts):
        center = (np.array(config.grid) - 1) / 2 + rng.uniform(-config.center_jitter,
                                                              config.center_jitter, 3)
        axis = _random_unit(rng)
        radius = rng.uniform(lo, hi)
        thickness = min(rng.uniform(*config.thickness_range) + widen, radius)
        extent = min(rng.uniform(*config.extent_range) + 10 * widen, 180.0)
        mask = shell_mask(config.grid, center, axis, radius, thickness, extent)
        if mask.any() and _component_count(mask) == 1:
            inner = radius - thickness
            frac = rng.uniform(*config.fetus_radius_frac)
            geom = ShellGeometry(center, axis, radius, thickness, extent, max(inner * frac, 0.0))
            return LabelMap(mask, config.spacing), geom
        widen += 0.5
    raise RuntimeError(f"could not draw a connected non-empty shell in {max_attempts} attempts")


def oxygenation_signal(t: int, config: PhantomConfig) -> float:
    """0 in normoxia, linear ramp to 1 over ``ramp_time`` frames in hyperoxia,
    linear decay back to 0 over the same time in the second normoxia."""
    n1, nh, _ = config.phase_lengths
    r = config.ramp_time
    if t < n1:
        return 0.0
    if t < n1 + nh:
        return min(1.0, (t - n1) / r)
    end = min(1.0, (nh - 1) / r) if nh > 0 else 0.0
    return end * max(0.0, 1.0 - (t - n1 - nh) / r)


def smooth_texture(shape, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance smooth random field."""
    field_ = ndimage.gaussian_filter(rng.normal(size=shape), smoothness, mode="wrap")
    std = field_.std()
    return (field_ - field_.mean()) / std if std > 0 else field_


def render_frame(shape: np.ndarray, fetus: np.ndarray, textures: dict, s: float,
                 config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Compose background, fetus and placenta intensities, then add noise.

    The placenta is scaled by (1 + A s); textures are multiplicative so the
    noiseless in-mask mean is exactly placenta_mean (1 + A s) when
    ``placenta_std`` is 0.
    """
    shape = np.asarray(shape, dtype=bool)
    fetus = np.asarray(fetus, dtype=bool) & ~shape
    img = config.background_mean * (1 + config.background_std * textures["background"])
    img = np.where(fetus, config.fetus_mean * (1 + config.fetus_std * textures["fetus"]), img)
    placenta = (config.placenta_mean * (1 + config.hyperoxia_amplitude * s)
                * (1 + config.placenta_std * textures["placenta"]))
    img = np.where(shape, placenta, img)
    if config.noise_sigma > 0:
        img = img + rng.normal(0.0, config.noise_sigma, img.shape)
    return img.astype(np.float32)


def clamp_displacement(field_: np.ndarray, bound: float) -> np.ndarray:
    norm = np.sqrt((field_**2).sum(axis=0))
    scale = np.minimum(1.0, bound / np.maximum(norm, 1e-12))
    return field_ * scale


def deform_frame(shape, field_: np.ndarray, fetus=None, textures: Optional[dict] = None):
    """Warp the frame-0 geometry by ``field_`` (out(x) = in(x + u(x))).

    Masks use nearest neighbour, textures trilinear. Returns
    (label, fetus, textures) with ``None`` for inputs not given.
    """
    data = shape.data if isinstance(shape, LabelMap) else np.asarray(shape)
    coords = np.indices(data.shape, dtype=np.float64) + field_
    label = ndimage.map_coordinates(data.astype(np.uint8), coords, order=0, mode="constant")
    out_label = LabelMap(label, shape.spacing) if isinstance(shape, LabelMap) else label
    out_fetus = None
    if fetus is not None:
        out_fetus = ndimage.map_coordinates(np.asarray(fetus, dtype=np.uint8), coords, order=0,
                                            mode="constant").astype(bool)
    out_tex = None
    if textures is not None:
        out_tex = {k: ndimage.map_coordinates(v, coords, order=1, mode="nearest")
                   for k, v in textures.items()}
    return out_label, out_fetus, out_tex


def generate_subject(config: PhantomConfig, rng: np.random.Generator, subject_id: str = "phantom",
                     record: Optional[SubjectRecord] = None, max_retries: int = 10) -> PhantomSubject:
    """Shell + per-frame deformation + oxygenation rendering with dense labels."""
    shape, geom = make_placenta_shape(config, rng)
    grid = np.indices(config.grid, dtype=np.float64)
    fetus = ((grid - geom.center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0) <= geom.fetus_radius**2
    textures = {name: smooth_texture(config.grid, config.texture_smoothness, rng)
                for name in ("background", "fetus", "placenta")}

    k = config.motion_control_points
    controls = np.zeros((config.frames, 3, k, k, k))
    innovation = config.sigma * math.sqrt(1 - config.motion_rho**2)
    frames, labels, signal = [], {}, []
    for t in range(config.frames):
        if t == 0 or config.motion_amplitude == 0:
            label, fet, tex = shape, fetus, textures
        else:
            for attempt in range(max_retries):
                scale = innovation * 0.5**attempt
                controls[t] = config.motion_rho * controls[t - 1] + scale * rng.normal(size=(3, k, k, k))
                u = clamp_displacement(dense_field(controls[t], config.grid), config.motion_amplitude)
                label, fet, tex = deform_frame(shape, u, fetus, textures)
                if not label.is_empty() and _component_count(label.mask) == 1:
                    break
            else:
                raise RuntimeError(f"frame {t} of {subject_id} stayed disconnected after {max_retries} draws")
        s = oxygenation_signal(t, config)
        signal.append(s)
        frames.append(Volume(render_frame(label.mask, fet, tex, s, config, rng), config.spacing))
        labels[t] = label
    series = TimeSeries(frames, phases_from_lengths(config.phase_lengths), labels, subject_id)
    truth = PhantomTruth(geom, shape, fetus, controls, np.array(signal), config.motion_amplitude)
    return PhantomSubject(series, truth, record or SubjectRecord(subject_id), config)


def cohort_record(i: int, subject_id: str) -> SubjectRecord:
    """Round-robin synthetic tags: cohorts cycle, every fifth subject is a twin."""
    return SubjectRecord(subject_id, COHORT_CYCLE[i % 3], "twin" if i % 5 == 4 else "singleton")


def generate_cohort(n: int, config: PhantomConfig, seed: int = 0,
                    fractions=(0.65, 0.15, 0.20)):
    """``n`` subjects with per-subject rng streams (seed, i), plus their stratified split.

    Returns (subjects, (train, val, test)) where the split holds subject lists.
    """
    from .trainer import stratified_split

    subjects = []
    for i in range(n):
        sid = f"phantom{i:03d}"
        rng = np.random.default_rng([seed, i])
        subjects.append(generate_subject(config, rng, sid, cohort_record(i, sid)))
    by_id = {s.record.subject_id: s for s in subjects}
    roles = stratified_split([s.record for s in subjects], fractions, seed)
    split = tuple([by_id[r.subject_id] for r in role] for role in roles)
    return subjects, split
