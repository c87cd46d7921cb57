"""Loss-comparison protocol: every objective trained on one phantom split, several seeds."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .analysis import write_csv
from .losses import LossConfig
from .phantom import PhantomConfig, generate_cohort
from .trainer import TrainConfig, build_index, evaluate_index, train

log = logging.getLogger(__name__)

METRICS = ("dice", "hd95_mm", "assd_mm", "bold_error_pct")


@dataclass
class BenchmarkConfig:
    losses: list = field(default_factory=lambda: ["BW-CE", "CE"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_subjects: int = 20
    data_seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig.desk)

    def __post_init__(self):
        if isinstance(self.losses, str):
            self.losses = [s.strip() for s in self.losses.split(",") if s.strip()]
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        if isinstance(self.phantom, dict):
            self.phantom = PhantomConfig(**self.phantom)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if not self.losses or not self.seeds:
            raise ValueError("benchmark needs at least one loss and one seed")

    def run_config(self, loss, seed: int) -> TrainConfig:
        """Training config for one (loss, seed) run; boundary kernel follows the base config."""
        lc = LossConfig.from_dict(loss) if not isinstance(loss, LossConfig) else loss
        if isinstance(loss, str):
            lc = replace(lc, kernel_size=self.train.loss.kernel_size, w1=self.train.loss.w1,
                         w2=self.train.loss.w2, wc=self.train.loss.wc)
        return replace(self.train, loss=lc, seed=int(seed))

    def to_dict(self) -> dict:
        return {"losses": list(self.losses), "seeds": list(self.seeds), "n_subjects": self.n_subjects,
                "data_seed": self.data_seed, "phantom": self.phantom.to_dict(),
                "train": self.train.to_dict()}


@dataclass
class BenchmarkResult:
    runs: list  # one row per (loss, seed): mean test metrics
    frames: list  # one row per (loss, seed, test frame)
    models: dict = field(default_factory=dict)  # (loss, seed) -> TrainResult

    def summary(self) -> list[dict]:
        return summarize_runs(self.runs)

    def dice_by_seed(self, loss: str) -> dict[int, float]:
        return {r["seed"]: r["dice"] for r in self.runs if r["loss"] == loss}


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def summarize_runs(runs: Sequence[dict]) -> list[dict]:
    """Mean and sample std over seeds of each run-level metric, one row per loss."""
    out = []
    for loss in dict.fromkeys(r["loss"] for r in runs):
        rows = [r for r in runs if r["loss"] == loss]
        row = {"loss": loss, "n_seeds": len(rows)}
        for m in METRICS:
            v = np.array([r[m] for r in rows], dtype=float)
            v = v[~np.isnan(v)]
            row[f"{m}_mean"] = float(v.mean()) if v.size else float("nan")
            row[f"{m}_std"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append(row)
    return out


def run_benchmark(config: BenchmarkConfig, out_dir: str | Path | None = None,
                  keep_models: bool = False,
                  progress: Optional[Callable[[str], None]] = None) -> BenchmarkResult:
    subjects, (tr, va, te) = generate_cohort(config.n_subjects, config.phantom, config.data_seed,
                                             config.train.fractions)
    base = config.train
    indices = build_index(tr, "train", base), build_index(va, "val", base), build_index(te, "test", base)
    out_dir = Path(out_dir) if out_dir is not None else None
    runs, frames, models = [], [], {}
    for loss in config.losses:
        for seed in config.seeds:
            cfg = config.run_config(loss, seed)
            name = cfg.loss.name
            started = time.time()
            run_dir = out_dir / f"{name}_seed{seed}" if out_dir is not None else None
            result = train(cfg, indices[0], indices[1], run_dir)
            rows = evaluate_index(result.network(), indices[2], cfg.threshold, cfg.connectivity)
            for r in rows:
                frames.append({"loss": name, "seed": seed, **r})
            run = {"loss": name, "seed": seed, "best_epoch": result.checkpoint.epoch,
                   "val_dice": result.checkpoint.val_dice}
            run.update({m: _nanmean([r[m] for r in rows]) for m in METRICS})
            run["seconds"] = time.time() - started
            runs.append(run)
            if keep_models:
                models[(name, seed)] = result
            msg = f"{name} seed {seed}: test dice {run['dice']:.2f} (best epoch {run['best_epoch']})"
            log.info(msg)
            if progress is not None:
                progress(msg)
    result = BenchmarkResult(runs, frames, models)
    if out_dir is not None:
        write_csv(runs, out_dir / "runs.csv")
        write_csv(frames, out_dir / "frames.csv")
        write_csv(result.summary(), out_dir / "summary.csv")
    return result


def sign_agreement(result: BenchmarkResult, better: str, worse: str) -> tuple[int, int]:
    """(seeds where ``better`` >= ``worse`` in test Dice, seeds compared)."""
    a, b = result.dice_by_seed(better), result.dice_by_seed(worse)
    common = sorted(set(a) & set(b))
    wins = sum(1 for s in common if not math.isnan(a[s]) and a[s] >= b[s])
    return wins, len(common)

