"""Hyperoxia response, cohort summaries and figure rendering."""

from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import mean_in_mask  # noqa: E402
from .volume import PHASES, TimeSeries  # noqa: E402

log = logging.getLogger(__name__)

FAILURE_DICE = 70.0


def frame_means(series: TimeSeries, masks: Mapping[int, object]) -> dict[int, float]:
    """Mean in-mask intensity per processed frame (NaN for empty masks)."""
    return {t: mean_in_mask(series.frames[t], masks[t]) for t in sorted(masks)}


def hyperoxia_response(series: TimeSeries, masks: Mapping[int, object], last_n: int = 10,
                       pooled: bool = False) -> float:
    """Percent change 100 |b_H - b_N| / b_N.

    b_N averages every processed frame of the first normoxic block; b_H the
    last ``last_n`` processed hyperoxic frames. With ``pooled`` the voxels of
    those frames are pooled instead of averaging per-frame means.
    """
    processed = sorted(t for t in masks if not _empty(masks[t]))
    baseline = [t for t in processed if series.phase[t] == PHASES[0]]
    hyper = [t for t in processed if series.phase[t] == PHASES[1]]
    if not baseline:
        raise ValueError("no processed frames in the baseline (first normoxic) block")
    if not hyper:
        raise ValueError("no processed frames in the hyperoxic block")
    if len(hyper) < last_n:
        warnings.warn(f"only {len(hyper)} processed hyperoxic frames; using all of them")
    hyper = hyper[-last_n:]

    def level(frames):
        if pooled:
            values = np.concatenate([np.asarray(series.frames[t].data, dtype=np.float64)[_mask(masks[t])]
                                     for t in frames])
            return float(values.mean())
        return float(np.mean([mean_in_mask(series.frames[t], masks[t]) for t in frames]))

    b_n, b_h = level(baseline), level(hyper)
    if b_n == 0:
        raise ValueError("baseline signal is zero")
    return 100.0 * abs(b_h - b_n) / b_n


def _mask(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m)).astype(bool)


def _empty(m) -> bool:
    return not _mask(m).any()


def summarize_cohort(rows: Sequence[Mapping], metrics: Sequence[str], group: str = "cohort",
                     include_all: bool = True) -> list[dict]:
    """Mean and sample std (0 for a single subject) of each metric per group."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[group], []).append(row)
    if include_all:
        groups = {"all": list(rows), **groups}
    out = []
    for name, members in groups.items():
        for metric in metrics:
            values = np.array([float(r[metric]) for r in members], dtype=float)
            values = values[~np.isnan(values)]
            n = int(values.size)
            out.append({
                group: name,
                "metric": metric,
                "n": n,
                "mean": float(values.mean()) if n else float("nan"),
                "std": float(values.std(ddof=1)) if n > 1 else 0.0,
            })
    return out


def write_csv(rows: Sequence[Mapping], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames: list = []
    for r in rows:
        fieldnames.extend(k for k in r if k not in fieldnames)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def box_stats(values) -> dict:
    """Five-number summary with whiskers at the most extreme points within 1.5 IQR."""
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "median": float(med), "q1": float(q1), "q3": float(q3), "mean": float(v.mean()),
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "outliers": v[(v < lo_fence) | (v > hi_fence)].tolist(),
    }


def plot_box_whisker(columns: Mapping[str, Sequence[float]], path: str | Path,
                     ylabel: str = "Dice") -> dict:
    """One box per model; outliers as crosses, means printed along the top axis.

    Empty columns are skipped with a warning. Returns the per-column stats.
    """
    data, names = [], []
    for name, values in columns.items():
        values = [float(x) for x in values if not np.isnan(float(x))]
        if not values:
            warnings.warn(f"column {name!r} is empty; skipped")
            continue
        data.append(values)
        names.append(name)
    stats = {n: box_stats(v) for n, v in zip(names, data)}
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names) + 1), 4))
    if data:
        ax.boxplot(data, whis=1.5, sym="x", medianprops={"color": "black"})
        ax.set_xticks(range(1, len(names) + 1), names, rotation=30, ha="right")
        top = ax.secondary_xaxis("top")
        top.set_xticks(range(1, len(names) + 1), [f"{stats[n]['mean']:.2f}" for n in names])
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return stats


def flag_failures(values: Sequence[float], threshold: float = FAILURE_DICE) -> list[int]:
    """Positions of consecutive-Dice values below ``threshold``."""
    return [i for i, v in enumerate(values) if v < threshold]


def plot_consecutive_density(per_subject: Mapping[str, Sequence[float]], path: str | Path,
                             threshold: float = FAILURE_DICE) -> dict[str, list[int]]:
    """Per-subject violins of consecutive Dice with median dots; returns flagged positions."""
    names = list(per_subject)
    flagged = {n: flag_failures(per_subject[n], threshold) for n in names}
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 1), 4))
    for i, name in enumerate(names, start=1):
        v = np.asarray(per_subject[name], dtype=float)
        if v.size == 0:
            continue
        if np.ptp(v) > 0:
            ax.violinplot(v, positions=[i], showextrema=False)
        else:
            ax.plot([i - 0.3, i + 0.3], [v[0], v[0]], color="C0")
        ax.plot(i, np.median(v), "o", color="black", ms=4)
        bad = v[v < threshold]
        if bad.size:
            ax.plot(np.full(bad.size, i), bad, "x", color="red")
    ax.axhline(threshold, color="red", lw=0.8, ls="--")
    ax.set_xticks(range(1, len(names) + 1), names, rotation=45, ha="right")
    ax.set_ylabel("consecutive Dice")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return flagged


def plot_timecourse(series: TimeSeries, masks: Mapping[int, object], path: str | Path) -> np.ndarray:
    """Mean in-mask BOLD per frame with phase shading.

    Frames without a mask, or with an empty one, are left as gaps (NaN).
    """
    values = np.full(len(series), np.nan)
    for t in sorted(masks):
        if _empty(masks[t]):
            warnings.warn(f"empty mask at frame {t}; left as a gap")
            continue
        values[t] = mean_in_mask(series.frames[t], masks[t])
    fig, ax = plt.subplots(figsize=(6, 3))
    colors = {"normoxia1": "0.9", "hyperoxia": "#f6d5d5", "normoxia2": "0.9"}
    start = 0
    for name, n in zip(PHASES, series.block_lengths()):
        if n:
            ax.axvspan(start - 0.5, start + n - 0.5, color=colors[name], lw=0)
        start += n
    processed = np.array(sorted(masks))
    ax.plot(processed, values[processed], ".-", color="black")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean BOLD in mask")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return values
