"""Acceptance gate: one recorded PASS/FAIL line per criterion.

The training criteria share a single session-scoped desk benchmark
(4 objectives x 3 seeds on a 20-subject 32^3 phantom cohort), so the full
suite takes about an hour on one CPU core.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from bwseg.analysis import flag_failures, hyperoxia_response, plot_consecutive_density
from bwseg.benchmark import BenchmarkConfig, run_benchmark, sign_agreement
from bwseg.boundary import boundary_band_conv, signed_distance_exact
from bwseg.inference import predict_series
from bwseg.losses import LossConfig, Objective, ce_loss, focal_loss, sdt_loss
from bwseg.metrics import assd, consecutive_dice, hd95, surface_mask
from bwseg.phantom import PhantomConfig, generate_cohort, generate_subject
from bwseg.preprocess import standard_pipeline
from bwseg.trainer import TrainConfig, build_index, train

from conftest import random_blob
from oracles import brute_surface_distances, relative_gradient_error
from test_losses import GRADIENT_CASES, _case

LOSSES = ["BW-CE", "CE", "BW-SDT", "SDT"]
SEEDS = [0, 1, 2]
MAX_EPOCHS = 300
CPU_BUDGET_S = 3 * 3600


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    config = BenchmarkConfig(losses=LOSSES, seeds=SEEDS, n_subjects=20)
    out = tmp_path_factory.mktemp("benchmark")
    result = run_benchmark(config, out, keep_models=True, progress=print)
    for row in result.summary():
        print(f"{row['loss']:>7}: dice {row['dice_mean']:.2f} +/- {row['dice_std']:.2f}, "
              f"hd95 {row['hd95_mm_mean']:.2f} mm, bold error {row['bold_error_pct_mean']:.2f}%")
    return config, result


@pytest.fixture(scope="session")
def bwce_model(bench):
    _, result = bench
    return result.models[("BW-CE", 0)].network()


def _preprocess(frame):
    return standard_pipeline(frame, (32, 32, 32), 90)


def test_band_oracle(accept):
    rng = np.random.default_rng(0)
    started = time.perf_counter()
    mismatches = 0
    for _ in range(50):
        mask = random_blob(rng, (32, 32, 32), smooth=rng.uniform(1.5, 4), level=rng.uniform(0.3, 0.8))
        cheb = np.abs(signed_distance_exact(mask, "chebyshev").data)
        for k in (3, 5, 11):
            r = (k - 1) // 2
            inner = (slice(r, 32 - r),) * 3
            band = boundary_band_conv(mask, k).band
            mismatches += int(np.sum(band[inner] != (cheb <= r)[inner]))
    elapsed = time.perf_counter() - started
    accept("band oracle", mismatches == 0 and elapsed < 60,
           f"{mismatches} mismatching voxels over 50 blobs x K in (3,5,11), {elapsed:.1f} s")


def test_surface_oracle(accept):
    rng = np.random.default_rng(1)

    def draw():
        while True:
            m = random_blob(rng, (14, 14, 14), smooth=1.5, level=rng.uniform(0.6, 0.9))
            if 0 < surface_mask(m).sum() <= 500:
                return m

    started = time.perf_counter()
    worst = 0.0
    for _ in range(30):
        a, b = draw(), draw()
        spacing = tuple(rng.choice([1.0, 1.5, 3.0], 3))
        ref = brute_surface_distances(a, b, spacing)
        worst = max(worst, abs(hd95(a, b, spacing) - np.percentile(ref, 95)),
                    abs(assd(a, b, spacing) - ref.mean()))
    elapsed = time.perf_counter() - started
    accept("surface-metric oracle", worst <= 1e-9 and elapsed < 60,
           f"max deviation {worst:.2e} mm on 30 pairs, {elapsed:.1f} s")


def test_gradient_suite(accept):
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    started = time.perf_counter()
    try:
        errors = {}
        for name, make in GRADIENT_CASES.items():
            f, x = make(_case(0))
            errors[name] = relative_gradient_error(f, x)
    finally:
        torch.set_default_dtype(old)
    elapsed = time.perf_counter() - started
    worst = max(errors, key=errors.get)
    accept("gradient suite", max(errors.values()) < 1e-4 and elapsed < 120,
           f"{len(errors)} losses, worst {worst} at {errors[worst]:.2e}, {elapsed:.1f} s")


def test_reduction_identities(accept):
    label, prob, sdt, gt_sdt, _ = _case(2)
    ones = torch.ones_like(label)
    exact = (torch.equal(ce_loss(prob, label, ones), ce_loss(prob, label))
             and torch.equal(focal_loss(prob, label, weights=ones), focal_loss(prob, label))
             and torch.equal(sdt_loss(sdt, gt_sdt, ones), sdt_loss(sdt, gt_sdt)))
    torch.manual_seed(0)
    labels = (torch.rand(2, 8, 8, 8) > 0.5).float()
    for bw, plain in (("BW-CE", "CE"), ("BW-Focal", "Focal"), ("BW-SDT", "SDT")):
        out = torch.randn(2, 1 if "SDT" in bw else 2, 8, 8, 8)
        zero = Objective(LossConfig(bw, w1=0.0, w2=0.0, wc=1.0))(out, labels)[0]
        exact &= torch.equal(zero, Objective(LossConfig(plain))(out, labels)[0])
    focal_gap = float((focal_loss(prob, label, alpha=0.5, gamma=0.0) - 0.5 * ce_loss(prob, label)).abs())
    accept("reduction identities", exact and focal_gap <= 1e-9,
           f"bit-exact={exact}, |focal(g=0,a=.5) - CE/2| = {focal_gap:.1e}")


def test_desk_training(bench, accept):
    config, result = bench
    runs = [r for r in result.runs if r["loss"] == "BW-CE"]
    dice = [r["dice"] for r in runs]
    longest = max(r["seconds"] for r in runs)
    split = tuple(len(ix) for ix in generate_cohort(20, config.phantom, config.data_seed)[1])
    ok = (np.mean(dice) >= 85 and config.train.epochs <= MAX_EPOCHS and longest <= CPU_BUDGET_S
          and split == (13, 3, 4))
    accept("desk-scale training", ok,
           f"BW-CE test Dice {np.mean(dice):.2f} (seeds {', '.join(f'{d:.2f}' for d in dice)}), "
           f"split {split}, {config.train.epochs} epochs, slowest run {longest / 60:.1f} min")


@pytest.mark.parametrize("better,worse", [("BW-CE", "CE"), ("BW-SDT", "SDT")])
def test_directional_claim(bench, accept, better, worse):
    _, result = bench
    a, b = result.dice_by_seed(better), result.dice_by_seed(worse)
    wins, n = sign_agreement(result, better, worse)
    mean_a, mean_b = np.mean(list(a.values())), np.mean(list(b.values()))
    per_seed = ", ".join(f"seed {s}: {a[s]:.2f} vs {b[s]:.2f}" for s in sorted(a))
    accept(f"direction {better} >= {worse}", mean_a >= mean_b and wins >= 2,
           f"mean {mean_a:.2f} vs {mean_b:.2f}, {wins}/{n} seeds ({per_seed})")


def test_delta_b_ground_truth(accept):
    cfg = PhantomConfig.desk(frames=33, phase_lengths=(10, 13, 10)).noiseless()
    values = []
    for i in range(4):
        sub = generate_subject(cfg, np.random.default_rng([2, i]))
        values.append(hyperoxia_response(sub.series, sub.series.labels))
    worst = max(abs(v - 15.0) for v in values)
    accept("delta-b with true masks", worst <= 0.1,
           f"{', '.join(f'{v:.4f}' for v in values)} % (A = 0.15, 10-frame plateau)")


def test_delta_b_predicted(bwce_model, accept):
    # stride 2 over a 24-frame hyperoxic block leaves 10 processed plateau frames
    cfg = PhantomConfig.desk(frames=44, phase_lengths=(10, 24, 10))
    values = []
    for i in range(4):
        sub = generate_subject(cfg, np.random.default_rng([1, i]))
        pred = predict_series(bwce_model, sub.series, stride=2, preprocess=_preprocess)
        values.append(hyperoxia_response(sub.series, pred.masks))
    worst = max(abs(v - 15.0) for v in values)
    accept("delta-b with predicted masks", worst <= 3.0,
           f"{', '.join(f'{v:.2f}' for v in values)} % on 4 unseen subjects")


def test_temporal_consistency(bench, bwce_model, accept, tmp_path):
    config, _ = bench
    _, (_, _, test) = generate_cohort(20, config.phantom, config.data_seed)
    medians, per_subject = {}, {}
    for sub in test:
        pred = predict_series(bwce_model, sub.series, stride=2, preprocess=_preprocess)
        d = consecutive_dice([pred.masks[t] for t in pred.indices])
        per_subject[sub.record.subject_id] = d
        medians[sub.record.subject_id] = float(np.median(d))
    flagged = plot_consecutive_density(per_subject, tmp_path / "density.png")
    counts_match = all(len(flagged[s]) == int(np.sum(np.asarray(d) < 70)) == len(flag_failures(d))
                       for s, d in per_subject.items())
    n_flagged = sum(len(v) for v in flagged.values())
    accept("temporal consistency", min(medians.values()) >= 85 and counts_match,
           f"median consecutive Dice {', '.join(f'{m:.1f}' for m in medians.values())}; "
           f"{n_flagged} pairs flagged < 70, counts match scan: {counts_match}")


def test_reproducibility(accept, tmp_path):
    phantom = PhantomConfig.desk()
    _, (tr, va, _) = generate_cohort(20, phantom, 0)
    cfg = TrainConfig.desk(epochs=3)
    tri, vai = build_index(tr, "train", cfg), build_index(va, "val", cfg)
    train(cfg, tri, vai, tmp_path / "a")
    train(replace(cfg), tri, vai, tmp_path / "b")
    same = (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()
    accept("reproducibility", same, "per-epoch log.csv identical across two 3-epoch runs" if same
           else "log.csv differs between identical runs")
