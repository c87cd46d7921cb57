"""Command-line entry point: ``bwseg <subcommand> [--config file.json] [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("bwseg")

OUTPUT_ROOT_ENV = "BWSEG_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers -------------------------------------------------------------------


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _out_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _git_stamp() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(out_dir: Path, command: str, config: dict, seed=None, argv=None) -> Path:
    """Resolved config, seed and version stamp for reproducing a run."""
    import torch

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": _jsonable(config),
        "seed": seed,
        "version": __version__,
        "git": _git_stamp(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _merge(config: dict, overrides: dict) -> dict:
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _series_manifests(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    found = sorted(root.glob("*/manifest.json"))
    if (root / "manifest.json").exists():
        found.insert(0, root / "manifest.json")
    if not found:
        raise FileNotFoundError(f"no manifest.json under {root}")
    return found


# -- subcommands ---------------------------------------------------------------


def cmd_preprocess(args, argv) -> int:
    from .preprocess import deinterleave, standard_pipeline
    from .volume import LabelMap, TimeSeries, crop_or_pad, read_series, write_series

    cfg = _merge(_load_config(args.config), {"target_shape": args.target_shape,
                                              "percentile": args.percentile,
                                              "deinterleave": args.deinterleave or None})
    target = tuple(cfg.get("target_shape", (112, 112, 80)))
    percentile = float(cfg.get("percentile", 90))
    series, record = read_series(args.input)
    frames, phase, labels = [], [], {}
    for t, frame in enumerate(series.frames):
        parts = deinterleave(frame) if cfg.get("deinterleave") else (frame,)
        label = series.labels.get(t)
        label_parts = ((deinterleave(label.to_volume()) if cfg.get("deinterleave") else (label,))
                       if label is not None else (None,) * len(parts))
        for part, lab in zip(parts, label_parts):
            if lab is not None:
                mask = LabelMap(np.asarray(lab.data) > 0.5, lab.spacing, lab.affine)
                labels[len(frames)] = crop_or_pad(mask, target)
            frames.append(standard_pipeline(part, target, percentile))
            phase.append(series.phase[t])
    out = _out_path(args.out)
    write_series(TimeSeries(frames, phase, labels, series.subject_id), out, record)
    write_manifest(out, "preprocess", {**cfg, "input": args.input}, argv=argv)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_phantom(args, argv) -> int:
    from .phantom import PhantomConfig, generate_cohort
    from .volume import write_series

    cfg = _load_config(args.config)
    base = PhantomConfig.desk() if cfg.pop("desk", args.desk) else PhantomConfig()
    overrides = {}
    if args.grid is not None:
        overrides["grid"] = args.grid * 3 if len(args.grid) == 1 else args.grid
    if args.frames is not None:
        third = args.frames // 3
        overrides["frames"] = args.frames
        overrides["phase_lengths"] = (third, third, args.frames - 2 * third)
    n = int(cfg.pop("n", args.n if args.n is not None else 20))
    seed = int(cfg.pop("seed", args.seed if args.seed is not None else 0))
    config = replace(base, **{**cfg, **overrides})
    subjects, split = generate_cohort(n, config, seed)
    out = _out_path(args.out)
    for s in subjects:
        write_series(s.series, out / s.record.subject_id, s.record)
        np.savetxt(out / s.record.subject_id / "signal.txt", s.truth.signal)
    roles = {role: [s.record.subject_id for s in members]
             for role, members in zip(("train", "val", "test"), split)}
    (out / "split.json").write_text(json.dumps(roles, indent=2))
    write_manifest(out, "phantom", {"n": n, "phantom": config.to_dict()}, seed, argv)
    print(f"wrote {n} phantom subjects to {out}")
    return 0


def _train_config(args, cfg: dict):
    from .trainer import TrainConfig

    desk = cfg.pop("desk", False) or getattr(args, "desk", False)
    overrides = {k: v for k, v in {
        "epochs": getattr(args, "epochs", None), "lr0": getattr(args, "lr0", None),
        "batch_size": getattr(args, "batch_size", None), "seed": getattr(args, "seed", None),
        "loss": getattr(args, "loss", None), "val_every": getattr(args, "val_every", None),
        "target_shape": getattr(args, "target_shape", None),
    }.items() if v is not None}
    merged = {**cfg, **overrides}
    return TrainConfig.desk(**merged) if desk else TrainConfig.from_dict(merged)


def _load_dataset(root: Path, fractions, seed):
    from .trainer import stratified_split
    from .volume import read_series

    pairs = {}
    for m in _series_manifests(root):
        series, record = read_series(m)
        pairs[record.subject_id] = (record, series)
    split_file = root / "split.json" if root.is_dir() else None
    if split_file is not None and split_file.exists():
        roles = json.loads(split_file.read_text())
        return tuple([pairs[sid] for sid in roles[r]] for r in ("train", "val", "test"))
    roles = stratified_split([rec for rec, _ in pairs.values()], fractions, seed)
    return tuple([pairs[r.subject_id] for r in role] for role in roles)


def cmd_train(args, argv) -> int:
    from .trainer import build_index, train

    cfg = _load_config(args.config)
    data = cfg.pop("data", None) or args.data
    if data is None:
        raise UsageError("train needs a dataset: --data DIR or a 'data' key in the config")
    config = _train_config(args, cfg)
    out = _out_path(args.out)
    write_manifest(out, "train", {**config.to_dict(), "data": str(data)}, config.seed, argv)
    tr, va, _ = _load_dataset(Path(data), config.fractions, config.seed)
    result = train(config, build_index(tr, "train", config), build_index(va, "val", config), out,
                   progress=(lambda r: print(f"epoch {r['epoch']} loss {r['loss']:.5f} "
                                             f"val {r['val_dice']}")) if args.verbose else None)
    print(f"best epoch {result.checkpoint.epoch} val dice {result.checkpoint.val_dice:.2f}; "
          f"checkpoint {out / 'best.pt'}")
    return 0


def cmd_predict(args, argv) -> int:
    from .inference import predict_series
    from .model import load_checkpoint
    from .preprocess import standard_pipeline
    from .volume import read_series, save_volume

    cfg = _merge(_load_config(args.config), {"stride": args.stride, "threshold": args.threshold})
    ckpt = load_checkpoint(args.checkpoint)
    train_cfg = (ckpt.extra or {}).get("train_config", {})
    target = tuple(train_cfg.get("target_shape", (112, 112, 80)))
    percentile = float(train_cfg.get("percentile", 90))
    stride = int(cfg.get("stride", 2))
    threshold = float(cfg.get("threshold", train_cfg.get("threshold", 0.5)))
    connectivity = int(cfg.get("connectivity", train_cfg.get("connectivity", 26)))
    series, record = read_series(args.input)
    pred = predict_series(ckpt.network(), series, stride, threshold, connectivity,
                          preprocess=lambda v: standard_pipeline(v, target, percentile))
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for t, mask in pred.masks.items():
        name = f"pred_{t:04d}.nii.gz"
        save_volume(mask, out / name)
        files[str(t)] = name
    index = {"subject_id": record.subject_id, "stride": stride, "threshold": threshold,
             "target_shape": list(target), "percentile": percentile, "frames": files,
             "empty_frames": pred.empty_frames}
    (out / "index.json").write_text(json.dumps(index, indent=2))
    write_manifest(out, "predict", {**cfg, "checkpoint": str(args.checkpoint),
                                    "input": str(args.input)}, argv=argv)
    if pred.empty_frames:
        print(f"warning: empty predictions at frames {pred.empty_frames}", file=sys.stderr)
    print(f"wrote {len(files)} masks to {out}")
    return 0


def _read_predictions(pred_dir: Path):
    from .volume import load_labelmap

    index_path = pred_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no index.json in {pred_dir}")
    index = json.loads(index_path.read_text())
    masks = {int(t): load_labelmap(pred_dir / f) for t, f in index["frames"].items()}
    return index, masks


def cmd_evaluate(args, argv) -> int:
    from .analysis import write_csv
    from .metrics import evaluate_pair
    from .volume import crop_or_pad, read_series

    index, masks = _read_predictions(Path(args.pred))
    gt_series, record = read_series(_series_manifests(Path(args.gt))[0])
    img_series = gt_series if args.image is None else read_series(_series_manifests(Path(args.image))[0])[0]
    rows = []
    for t in sorted(masks):
        if t not in gt_series.labels:
            continue
        pred = masks[t]
        gt = crop_or_pad(gt_series.labels[t], pred.shape)
        image = crop_or_pad(img_series.frames[t], pred.shape)
        rows.append({"subject": record.subject_id, "frame": t, **evaluate_pair(image, gt, pred)})
    if not rows:
        raise ValueError("no predicted frame has a ground-truth label")
    out = _out_path(args.out)
    write_csv(rows, out)
    write_manifest(out.parent, "evaluate", {"pred": args.pred, "gt": args.gt, "image": args.image},
                   argv=argv)
    print(f"mean dice {np.mean([r['dice'] for r in rows]):.2f} over {len(rows)} frames -> {out}")
    return 0


def cmd_timeseries(args, argv) -> int:
    from .analysis import (hyperoxia_response, plot_consecutive_density, plot_timecourse,
                           write_csv)
    from .metrics import consecutive_dice
    from .volume import crop_or_pad, read_series

    cfg = _merge(_load_config(args.config), {"pooled": args.pooled or None,
                                              "last_n": args.last_n})
    index, masks = _read_predictions(Path(args.pred))
    series, record = read_series(args.manifest)
    shape = next(iter(masks.values())).shape
    series = type(series)([crop_or_pad(f, shape) for f in series.frames], series.phase, {},
                          series.subject_id)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = plot_timecourse(series, masks, out / "timecourse.png")
    write_csv([{"frame": t, "phase": series.phase[t], "mean_bold": float(values[t])}
               for t in sorted(masks)], out / "timecourse.csv")
    order = sorted(masks)
    cdice = consecutive_dice([masks[t] for t in order])
    flagged = plot_consecutive_density({record.subject_id: cdice}, out / "consecutive.png")
    write_csv([{"subject": record.subject_id, "frame": order[i], "next_frame": order[i + 1],
                "dice": d, "flagged": i in flagged[record.subject_id]} for i, d in enumerate(cdice)],
              out / "consecutive.csv")
    delta = hyperoxia_response(series, masks, int(cfg.get("last_n", 10)), bool(cfg.get("pooled")))
    summary = {"subject": record.subject_id, "cohort": record.cohort, "delta_b_pct": delta,
               "median_consecutive_dice": float(np.median(cdice)) if cdice else float("nan"),
               "flagged_pairs": len(flagged[record.subject_id])}
    write_csv([summary], out / "summary.csv")
    write_manifest(out, "timeseries", {**cfg, "pred": args.pred, "manifest": args.manifest}, argv=argv)
    print(f"delta_b {delta:.2f}% ; median consecutive dice {summary['median_consecutive_dice']:.2f}")
    return 0


def cmd_plot(args, argv) -> int:
    from .analysis import plot_box_whisker, plot_consecutive_density, read_csv

    rows = read_csv(args.input)
    out = _out_path(args.out)
    if args.kind == "box":
        columns: dict = {}
        for r in rows:
            columns.setdefault(r[args.group], []).append(float(r[args.value]))
        plot_box_whisker(columns, out, ylabel=args.value)
    elif args.kind == "consecutive":
        per_subject: dict = {}
        for r in rows:
            per_subject.setdefault(r["subject"], []).append(float(r["dice"]))
        plot_consecutive_density(per_subject, out)
    else:
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot([int(r["frame"]) for r in rows], [float(r["mean_bold"]) for r in rows], ".-",
                color="black")
        ax.set_xlabel("frame")
        ax.set_ylabel("mean BOLD in mask")
        fig.tight_layout()
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out)
        plt.close(fig)
    print(f"wrote {out}")
    return 0


def cmd_benchmark(args, argv) -> int:
    from .analysis import plot_box_whisker
    from .benchmark import BenchmarkConfig, run_benchmark
    from .phantom import PhantomConfig

    cfg = _load_config(args.config)
    train_cfg = _train_config(args, dict(cfg.pop("train", {})) | {"desk": cfg.pop("desk", True)})
    phantom = cfg.pop("phantom", None)
    phantom = PhantomConfig.desk(**phantom) if isinstance(phantom, dict) else PhantomConfig.desk()
    losses = args.losses or cfg.pop("losses", "BW-CE,CE")
    seeds = args.seeds if args.seeds is not None else cfg.pop("seeds", 3)
    n = args.n_subjects or cfg.pop("n_subjects", 20)
    config = BenchmarkConfig(losses, seeds, n, int(cfg.pop("data_seed", 0)), phantom, train_cfg)
    if cfg:
        raise UsageError(f"unknown benchmark config keys: {sorted(cfg)}")
    out = _out_path(args.out)
    write_manifest(out, "benchmark", config.to_dict(), list(config.seeds), argv)
    result = run_benchmark(config, out, progress=print)
    columns: dict = {}
    for r in result.frames:
        columns.setdefault(r["loss"], []).append(r["dice"])
    plot_box_whisker(columns, out / "dice_box.png")
    for row in result.summary():
        print(f"{row['loss']:>12}  dice {row['dice_mean']:.2f} ± {row['dice_std']:.2f}")
    print(f"summary -> {out / 'summary.csv'}")
    return 0


def cmd_weights(args, argv) -> int:
    from .boundary import weight_map
    from .volume import Volume, load_labelmap, save_volume

    label = load_labelmap(args.label)
    wm = weight_map(label, args.K, args.w1, args.w2, args.wc)
    out = _out_path(args.out)
    save_volume(Volume(wm.data.astype(np.float32), label.spacing, label.affine), out)
    values, counts = np.unique(wm.data, return_counts=True)
    print(", ".join(f"{v:g}: {c}" for v, c in zip(values, counts)))
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bwseg", description="Boundary-weighted placenta segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON config; flags override its keys")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "normalize and crop/pad a time series")
    p.add_argument("--in", dest="input", required=True, help="series manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--target-shape", type=_shape)
    p.add_argument("--percentile", type=float)
    p.add_argument("--deinterleave", action="store_true")

    p = add("phantom", cmd_phantom, "generate a synthetic cohort")
    p.add_argument("--n", type=int)
    p.add_argument("--grid", type=_shape)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--desk", action="store_true", help="32^3 desk-scale profile")
    p.add_argument("--out", required=True)

    def train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr0", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--val-every", type=int)
        p.add_argument("--target-shape", type=_shape)
        p.add_argument("--desk", action="store_true", help="desk-scale training profile")

    p = add("train", cmd_train, "train a network on a dataset directory")
    p.add_argument("--data", help="directory of subject folders with manifest.json")
    p.add_argument("--loss")
    p.add_argument("--out", required=True)
    train_flags(p)

    p = add("predict", cmd_predict, "segment a time series with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--threshold", type=float)

    p = add("evaluate", cmd_evaluate, "score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--image")
    p.add_argument("--out", required=True)

    p = add("timeseries", cmd_timeseries, "hyperoxia response and temporal consistency report")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pooled", action="store_true")
    p.add_argument("--last-n", type=int)

    p = add("plot", cmd_plot, "regenerate a figure from a CSV")
    p.add_argument("--kind", choices=("box", "consecutive", "timecourse"), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group", default="loss")
    p.add_argument("--value", default="dice")

    p = add("benchmark", cmd_benchmark, "compare losses on a desk-scale phantom cohort")
    p.add_argument("--losses", help="comma-separated loss names")
    p.add_argument("--seeds", type=int)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--out", default="benchmark")
    train_flags(p)

    p = add("weights", cmd_weights, "write the boundary weight map of a label")
    p.add_argument("--label", required=True)
    p.add_argument("--K", type=int, default=11)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=40.0)
    p.add_argument("--wc", type=float, default=1.0)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
