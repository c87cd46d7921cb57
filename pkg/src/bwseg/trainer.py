"""Subject-wise training loop with linear learning-rate decay and best-val selection."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, Sample, augment
from .inference import predict_probability, segment_probability
from .losses import LossConfig, Objective
from .metrics import dice, evaluate_pair
from .model import Checkpoint, UNetConfig, build_unet, save_checkpoint
from .preprocess import normalize_percentile
from .volume import LabelMap, SubjectRecord, TimeSeries, crop_or_pad

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")
# rng purpose codes; streams are seeded by (seed, purpose, epoch, ...)
_SAMPLE, _AUGMENT = 1, 2
DESK_KERNEL = 3


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 5500
    batch_size: int = 8
    seed: int = 0
    val_every: int = 25
    fractions: tuple = (0.65, 0.15, 0.20)
    target_shape: tuple = (112, 112, 80)
    percentile: float = 90.0
    n_labels: Optional[int] = 6  # labeled frames kept per subject; None keeps all
    threshold: float = 0.5
    connectivity: int = 26
    betas: tuple = (0.9, 0.999)
    num_threads: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.loss, (dict, str)):
            self.loss = LossConfig.from_dict(self.loss)
        if isinstance(self.model, dict):
            self.model = UNetConfig(**self.model)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.fractions = tuple(float(f) for f in self.fractions)
        self.target_shape = tuple(int(s) for s in self.target_shape)
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ValueError("batch_size, epochs and val_every must be >= 1")
        _check_fractions(self.fractions)
        # the network head follows the loss: SDT-type objectives regress a distance
        out_mode = "sdt_scalar" if self.loss.mode == "sdt" else "two_class_softmax"
        if self.model.out_mode != out_mode:
            self.model = replace(self.model, out_mode=out_mode)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["loss"] = self.loss.to_dict()
        d["model"] = self.model.to_dict()
        d["augment"] = self.augment.to_dict()
        for k in ("fractions", "target_shape", "betas"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized profile: 32^3 volumes, narrow network, validation every epoch.

        Voxel-valued augmentation magnitudes are scaled to the smaller grid,
        and the boundary kernel defaults to 3 (shells here are 2-4 voxels
        thick, so wider bands swallow the whole organ). Batches of 2 keep
        several optimizer steps per epoch on a 13-subject training set.
        """
        loss = overrides.pop("loss", "BW-CE")
        if isinstance(loss, str):
            loss = LossConfig(name=loss, kernel_size=DESK_KERNEL)
        elif isinstance(loss, dict) and "kernel_size" not in loss:
            loss = {**loss, "kernel_size": DESK_KERNEL}
        base = dict(
            epochs=150, lr0=1e-3, val_every=1, batch_size=2, target_shape=(32, 32, 32), loss=loss,
            model=UNetConfig(base_width=8),
            augment=AugmentConfig(noise_sigma=0.05, p_elastic=0.25).scaled(32 / 112),
        )
        base.update(overrides)
        return cls(**base)


def _check_fractions(fractions):
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear decay from lr0 at epoch 0 to 0 at ``config.epochs``."""
    return config.lr0 * max(0.0, 1.0 - epoch / config.epochs)


# -- splitting -----------------------------------------------------------------


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to n, proportional to fractions; remainder ties go to earlier roles."""
    quotas = [n * f for f in fractions]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(records: Sequence[SubjectRecord], fractions=(0.65, 0.15, 0.20),
                     seed: int = 0) -> tuple[list, list, list]:
    """Split subjects (never frames) into train/val/test.

    Role sizes follow the largest-remainder rule on the whole cohort. Each
    (plurality, cohort) stratum first receives floor(m * f) subjects per
    role; leftovers, and every stratum too small to put one subject in
    each role, are pooled and dealt out at random (ordered by plurality,
    then cohort) to fill the remaining slots.
    """
    fractions = tuple(float(f) for f in fractions)
    _check_fractions(fractions)
    records = list(records)
    if len(records) < 3:
        raise ValueError("need at least 3 subjects to split")
    ids = [r.subject_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    rng = np.random.default_rng([seed, 0])
    targets = largest_remainder(len(records), fractions)
    strata: dict = {}
    for r in sorted(records, key=lambda r: r.subject_id):
        strata.setdefault((r.plurality, r.cohort), []).append(r)

    roles: list[list] = [[], [], []]
    pool = []
    for key in sorted(strata):
        members = [strata[key][i] for i in rng.permutation(len(strata[key]))]
        floors = [int(math.floor(len(members) * f + 1e-9)) for f in fractions]
        if min(floors) < 1 and min(fractions) > 0:
            pool.extend(members)
            continue
        pos = 0
        for role, k in enumerate(floors):
            roles[role].extend(members[pos:pos + k])
            pos += k
        pool.extend(members[pos:])

    pool = [pool[i] for i in rng.permutation(len(pool))]
    pool.sort(key=lambda r: (r.plurality, r.cohort))
    for r in pool:
        deficits = [targets[i] - len(roles[i]) for i in range(3)]
        # fill whichever role is proportionally furthest below target
        role = max(range(3), key=lambda i: (deficits[i] / max(targets[i], 1), deficits[i], -i))
        if deficits[role] <= 0:
            raise AssertionError("split bookkeeping error")
        roles[role].append(r)
    return roles[0], roles[1], roles[2]


# -- datasets ------------------------------------------------------------------


@dataclass
class DatasetIndex:
    """Subjects of one role with preprocessed frames and their labeled subset."""

    subjects: list  # of (SubjectRecord, TimeSeries)
    role: str = "train"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        ids = [rec.subject_id for rec, _ in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("a subject appears twice in one role")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [rec.subject_id for rec, _ in self.subjects]


def check_disjoint(*indices: DatasetIndex) -> None:
    seen: dict = {}
    for idx in indices:
        for sid in idx.ids:
            if sid in seen and seen[sid] != idx.role:
                raise ValueError(f"subject {sid} appears in both {seen[sid]} and {idx.role}")
            seen[sid] = idx.role


def select_label_indices(available: Sequence[int], n: Optional[int]) -> list[int]:
    """Up to ``n`` label indices spread evenly over the available ones."""
    available = sorted(available)
    if n is None or n >= len(available):
        return available
    if n <= 0:
        return []
    picks = np.linspace(0, len(available) - 1, n).round().astype(int)
    return [available[i] for i in sorted(set(picks.tolist()))]


def prepare_series(series: TimeSeries, target_shape, percentile: float = 90.0,
                   n_labels: Optional[int] = None) -> TimeSeries:
    """Normalize and crop/pad every frame and label; keep ``n_labels`` labels."""
    frames = [crop_or_pad(normalize_percentile(f, percentile), target_shape) for f in series.frames]
    keep = select_label_indices(series.labels, n_labels)
    labels = {t: crop_or_pad(series.labels[t], target_shape) for t in keep}
    return TimeSeries(frames, series.phase, labels, series.subject_id)


def build_index(pairs, role: str, config: TrainConfig) -> DatasetIndex:
    """``pairs`` are (SubjectRecord, TimeSeries) or phantom subjects."""
    subjects = []
    for item in pairs:
        rec, series = (item.record, item.series) if hasattr(item, "series") else item
        subjects.append((rec, prepare_series(series, config.target_shape, config.percentile,
                                             config.n_labels)))
    return DatasetIndex(subjects, role)


def sample_epoch(index: DatasetIndex, rng: np.random.Generator) -> list[tuple[str, int, Sample]]:
    """One uniformly drawn labeled frame per subject, in shuffled order."""
    if index.role != "train":
        raise ValueError("sample_epoch draws from the train role only")
    picks = []
    for rec, series in index.subjects:
        if not series.labels:
            warnings.warn(f"subject {rec.subject_id} has no labeled frames; skipped")
            continue
        keys = list(series.labels)
        t = keys[int(rng.integers(len(keys)))]
        picks.append((rec.subject_id, t, Sample(series.frames[t], series.labels[t])))
    order = rng.permutation(len(picks))
    return [picks[i] for i in order]


# -- evaluation ----------------------------------------------------------------


def labeled_pairs(index: DatasetIndex, max_frames: Optional[int] = None):
    for rec, series in index.subjects:
        for t in select_label_indices(series.labels, max_frames):
            yield rec, t, series.frames[t], series.labels[t]


def predict_labels(network, frames, threshold=0.5, connectivity=26) -> list[LabelMap]:
    probs = predict_probability(network, list(frames))
    return [segment_probability(p, threshold, connectivity, f.spacing) for p, f in zip(probs, frames)]


def mean_dice(network, index: DatasetIndex, threshold=0.5, connectivity=26) -> float:
    items = list(labeled_pairs(index))
    if not items:
        raise ValueError(f"no labeled frames in the {index.role} set")
    preds = predict_labels(network, [f for _, _, f, _ in items], threshold, connectivity)
    return float(np.mean([dice(gt, p) for (_, _, _, gt), p in zip(items, preds)]))


def evaluate_index(network, index: DatasetIndex, threshold=0.5, connectivity=26) -> list[dict]:
    """Per labeled frame: subject, frame, phase, dice, hd95_mm, assd_mm, bold_error_pct."""
    items = list(labeled_pairs(index))
    preds = predict_labels(network, [f for _, _, f, _ in items], threshold, connectivity)
    rows = []
    for (rec, t, frame, gt), pred in zip(items, preds):
        row = {"subject": rec.subject_id, "cohort": rec.cohort, "plurality": rec.plurality,
               "frame": t}
        row.update(evaluate_pair(frame, gt, pred))
        rows.append(row)
    return rows


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    last_state: dict = field(repr=False, default=None)

    def network(self):
        return self.checkpoint.network()


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr", "val_dice"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if row[k] is None else repr(row[k])) for k in writer.fieldnames})


def train(config: TrainConfig, train_index: DatasetIndex, val_index: DatasetIndex,
          out_dir: str | Path | None = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize the configured objective and return the best-validation checkpoint.

    Each epoch draws one labeled frame per training subject, augments it,
    and takes Adam steps over batches of ``batch_size`` (last partial batch
    kept) at ``lr_at(epoch)``. Validation Dice (post-processed) is computed
    every ``val_every`` epochs and at the last epoch; ties keep the earlier
    epoch.
    """
    if train_index.role != "train" or val_index.role != "val":
        raise ValueError("train() needs a train-role and a val-role index")
    if not len(train_index) or not len(val_index):
        raise ValueError("train and val sets must be non-empty")
    check_disjoint(train_index, val_index)

    torch.set_num_threads(config.num_threads)
    net = build_unet(config.model, seed=config.seed)
    objective = Objective(config.loss)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr0, betas=config.betas)
    history: list[dict] = []
    best_dice, best_state, best_epoch = -math.inf, None, -1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2))

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        picks = sample_epoch(train_index, np.random.default_rng([config.seed, _SAMPLE, epoch]))
        aug_rng = np.random.default_rng([config.seed, _AUGMENT, epoch])
        total, count = 0.0, 0
        for batch in _batches(picks, config.batch_size):
            samples = [augment(s, config.augment, aug_rng) for _, _, s in batch]
            x = torch.from_numpy(np.stack([np.asarray(s.image.data, dtype=np.float32)
                                           for s in samples])).unsqueeze(1)
            y = torch.from_numpy(np.stack([s.label.data for s in samples]).astype(np.float32))
            opt.zero_grad()
            loss, _ = objective(net(x), y)
            if not torch.isfinite(loss):
                ids = [(sid, t) for sid, t, _ in batch]
                raise TrainingError(f"non-finite loss at epoch {epoch}; batch (subject, frame): {ids}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        row = {"epoch": epoch, "loss": total / count, "lr": lr, "val_dice": None}
        if (epoch + 1) % config.val_every == 0 or epoch == config.epochs - 1:
            row["val_dice"] = mean_dice(net, val_index, config.threshold, config.connectivity)
            if row["val_dice"] > best_dice:
                best_dice, best_epoch = row["val_dice"], epoch
                best_state = copy.deepcopy(net.state_dict())
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d loss %.5f lr %.2e val %s", epoch, row["loss"], lr, row["val_dice"])
        if out_dir is not None:
            write_history(history, out_dir / "log.csv")

    extra = {"loss": config.loss.to_dict(), "train_config": config.to_dict()}
    ckpt = Checkpoint(config.model, best_state, best_epoch, best_dice, opt.state_dict(),
                      {"seed": config.seed}, extra)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "best.pt")
    return TrainResult(ckpt, history, copy.deepcopy(net.state_dict()))
