"""Volumes, label maps and time series, plus NIfTI and manifest I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import nibabel as nib
import numpy as np

PHASES = ("normoxia1", "hyperoxia", "normoxia2")
COHORTS = ("control", "FGR", "highBMI")
PLURALITIES = ("singleton", "twin")


class VolumeIOError(IOError):
    """Raised when a volume file cannot be read or written."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """3D intensity grid with voxel spacing in mm.

    ``affine`` is carried through I/O untouched; nothing in the toolkit
    resamples to canonical orientation.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.number) or np.issubdtype(data.dtype, np.complexfloating):
            raise ValueError(f"unsupported volume dtype {data.dtype}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        if self.affine is not None:
            object.__setattr__(self, "affine", _frozen(np.asarray(self.affine, dtype=float)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, spacing=None, affine=None) -> "Volume":
        return Volume(
            data,
            self.spacing if spacing is None else spacing,
            self.affine if affine is None else affine,
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Binary mask stored as uint8 with values in {0, 1}."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.all((data == 0) | (data == 1)):
            raise ValueError("label values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        if self.affine is not None:
            object.__setattr__(self, "affine", _frozen(np.asarray(self.affine, dtype=float)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def mask(self) -> np.ndarray:
        return self.data.astype(bool)

    def count(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing, self.affine)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    cohort: str = "control"
    plurality: str = "singleton"
    gestational_age: Optional[tuple[int, int]] = None  # (weeks, days)

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValueError(f"unknown cohort {self.cohort!r}")
        if self.plurality not in PLURALITIES:
            raise ValueError(f"unknown plurality {self.plurality!r}")


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Ordered BOLD frames with a three-block oxygenation phase annotation
    and sparse ground-truth labels keyed by frame index."""

    frames: Sequence[Volume]
    phase: Sequence[str]
    labels: Mapping[int, LabelMap] = field(default_factory=dict)
    subject_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        phase = tuple(self.phase)
        if not frames:
            raise ValueError("time series needs at least one frame")
        shape, spacing = frames[0].shape, frames[0].spacing
        for f in frames:
            if f.shape != shape or not np.allclose(f.spacing, spacing):
                raise ValueError("all frames must share shape and spacing")
        if len(phase) != len(frames):
            raise ValueError("one phase entry per frame required")
        order = []
        for p in phase:
            if p not in PHASES:
                raise ValueError(f"unknown phase {p!r}")
            order.append(PHASES.index(p))
        if any(b < a for a, b in zip(order, order[1:])):
            raise ValueError("phases must form contiguous normoxia1 -> hyperoxia -> normoxia2 blocks")
        labels = {int(k): v for k, v in dict(self.labels).items()}
        for k, lab in labels.items():
            if not 0 <= k < len(frames):
                raise ValueError(f"label index {k} out of range")
            if lab.shape != shape:
                raise ValueError(f"label {k} shape {lab.shape} does not match frames {shape}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "labels", dict(sorted(labels.items())))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def phase_indices(self, name: str) -> list[int]:
        return [i for i, p in enumerate(self.phase) if p == name]

    def block_lengths(self) -> tuple[int, int, int]:
        return tuple(sum(1 for p in self.phase if p == name) for name in PHASES)


def phases_from_lengths(lengths: Sequence[int]) -> list[str]:
    return [name for name, n in zip(PHASES, lengths) for _ in range(int(n))]


# -- NIfTI -----------------------------------------------------------------


def _affine_for(spacing, affine) -> np.ndarray:
    if affine is not None:
        return np.asarray(affine, dtype=float)
    return np.diag([*spacing, 1.0])


def _read_nifti(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"no such volume file: {path}")
    try:
        img = nib.load(str(path))
        if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
            raise VolumeIOError(f"{path} is not a NIfTI image")
        data = np.asarray(img.dataobj)
    except VolumeIOError:
        raise
    except Exception as exc:
        raise VolumeIOError(f"failed to read {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeIOError(f"{path} holds a {data.ndim}D payload, expected 3D")
    if not np.all(np.isfinite(data)):
        raise VolumeIOError(f"{path} contains NaN or Inf")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, spacing, np.asarray(img.affine, dtype=float)


def load_volume(path: str | Path) -> Volume:
    data, spacing, affine = _read_nifti(path)
    try:
        return Volume(data, spacing, affine)
    except ValueError as exc:
        raise VolumeIOError(f"invalid volume in {path}: {exc}") from exc


def save_volume(volume: Volume | LabelMap, path: str | Path) -> None:
    path = Path(path)
    data = np.asarray(volume.data)
    if data.dtype == np.float16 or data.dtype == bool:
        data = data.astype(np.float32 if data.dtype == np.float16 else np.uint8)
    img = nib.Nifti1Image(data, _affine_for(volume.spacing, volume.affine))
    img.header.set_zooms(volume.spacing)
    img.header.set_data_dtype(data.dtype)
    # keep stored values raw so that reads are bit-exact
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    try:
        nib.save(img, str(path))
    except Exception as exc:
        raise VolumeIOError(f"failed to write {path}: {exc}") from exc


def load_labelmap(path: str | Path, threshold: float = 0.5) -> LabelMap:
    data, spacing, affine = _read_nifti(path)
    return LabelMap((data > threshold).astype(np.uint8), spacing, affine)


# -- shape standardization ---------------------------------------------------


def centered_margins(size: int, target: int) -> tuple[int, int]:
    """(low, high) margins to pad (positive) or crop (negative) one axis.

    The odd voxel goes to the high-index side in both directions.
    """
    diff = target - size
    lo = abs(diff) // 2
    hi = abs(diff) - lo
    return (lo, hi) if diff >= 0 else (-lo, -hi)


def crop_or_pad(volume, target: Sequence[int], fill: float = 0):
    """Center ``volume`` in a grid of shape ``target``.

    Works on Volume and LabelMap alike; the affine origin is shifted so
    that world coordinates of retained voxels are unchanged.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target must be three dims >= 1, got {target}")
    data = np.asarray(volume.data)
    margins = [centered_margins(s, t) for s, t in zip(data.shape, target)]
    pads = [(max(lo, 0), max(hi, 0)) for lo, hi in margins]
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=fill)
    slices = tuple(
        slice(-lo if lo < 0 else 0, data.shape[ax] + hi if hi < 0 else data.shape[ax])
        for ax, (lo, hi) in enumerate(margins)
    )
    data = data[slices]
    affine = None
    if volume.affine is not None:
        shift = np.array([-lo for lo, _ in margins], dtype=float)
        affine = np.array(volume.affine, dtype=float)
        affine[:3, 3] = affine[:3, 3] + affine[:3, :3] @ shift
    return type(volume)(data, volume.spacing, affine)


# -- time-series manifests ---------------------------------------------------


def write_series(series: TimeSeries, directory: str | Path, record: SubjectRecord | None = None,
                 compress: bool = True) -> Path:
    """Write one NIfTI per frame/label plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if compress else ".nii"
    frames = []
    for t, frame in enumerate(series.frames):
        name = f"frame_{t:04d}{ext}"
        save_volume(frame, directory / name)
        frames.append(name)
    labels = {}
    for t, lab in series.labels.items():
        name = f"label_{t:04d}{ext}"
        save_volume(lab, directory / name)
        labels[str(t)] = name
    record = record or SubjectRecord(series.subject_id)
    manifest = {
        "subject_id": series.subject_id or record.subject_id,
        "cohort": record.cohort,
        "plurality": record.plurality,
        "frames": frames,
        "phase": list(series.phase),
        "labels": labels,
    }
    if record.gestational_age is not None:
        manifest["gestational_age"] = list(record.gestational_age)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_series(manifest_path: str | Path) -> tuple[TimeSeries, SubjectRecord]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise VolumeIOError(f"no such manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"malformed manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    frames = [load_volume(root / p) for p in manifest["frames"]]
    labels = {int(k): load_labelmap(root / p) for k, p in manifest.get("labels", {}).items()}
    ga = manifest.get("gestational_age")
    record = SubjectRecord(
        manifest["subject_id"],
        manifest.get("cohort", "control"),
        manifest.get("plurality", "singleton"),
        tuple(ga) if ga else None,
    )
    series = TimeSeries(frames, manifest["phase"], labels, manifest["subject_id"])
    return series, record
