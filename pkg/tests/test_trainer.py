import csv
from collections import Counter

import numpy as np
import pytest

from bwseg.model import UNetConfig
from bwseg.phantom import PhantomConfig, generate_subject
from bwseg.trainer import (DatasetIndex, TrainConfig, TrainingError, build_index, check_disjoint,
                           largest_remainder, lr_at, mean_dice, sample_epoch,
                           select_label_indices, stratified_split, train)
from bwseg.volume import LabelMap, SubjectRecord, TimeSeries, Volume, phases_from_lengths


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(cfg.epochs, cfg) == 0
    assert lr_at(cfg.epochs / 2, cfg) == pytest.approx(5e-5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(fractions=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3, "bogus": 1})


def test_head_follows_loss():
    assert TrainConfig(loss="SDT").model.out_mode == "sdt_scalar"
    assert TrainConfig(loss="BW-CE").model.out_mode == "two_class_softmax"


def test_config_round_trip():
    cfg = TrainConfig.desk(loss="BW-SDT", seed=4)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("n,expected", [(20, [13, 3, 4]), (3, [2, 0, 1]), (10, [7, 1, 2]), (7, [5, 1, 1])])
def test_largest_remainder(n, expected):
    assert largest_remainder(n, (0.65, 0.15, 0.20)) == expected
    assert sum(largest_remainder(n, (0.65, 0.15, 0.20))) == n


def _records(n, cohort="control", plurality="singleton", prefix="s"):
    return [SubjectRecord(f"{prefix}{i:02d}", cohort, plurality) for i in range(n)]


def test_split_sizes_and_determinism():
    recs = _records(20)
    a = stratified_split(recs, seed=3)
    assert [len(r) for r in a] == [13, 3, 4]
    assert a == stratified_split(recs, seed=3)
    ids = [r.subject_id for role in a for r in role]
    assert sorted(ids) == sorted(r.subject_id for r in recs)


def test_split_is_proportional_per_stratum():
    recs = _records(20, "control", prefix="c") + _records(20, "FGR", prefix="f")
    tr, va, te = stratified_split(recs, seed=0)
    for role, n in ((tr, 13), (va, 3), (te, 4)):
        counts = Counter(r.cohort for r in role)
        assert counts == {"control": n, "FGR": n}


def test_small_stratum_falls_back():
    recs = _records(18) + _records(2, "FGR", "twin", prefix="t")
    tr, va, te = stratified_split(recs, seed=1)
    assert [len(r) for r in (tr, va, te)] == [13, 3, 4]
    twins = [i for i, role in enumerate((tr, va, te)) for r in role if r.plurality == "twin"]
    assert len(twins) == 2


def test_split_errors():
    with pytest.raises(ValueError):
        stratified_split(_records(2))
    with pytest.raises(ValueError):
        stratified_split(_records(3) + _records(1))


def test_select_label_indices():
    assert select_label_indices(range(10), 6) == [0, 2, 4, 5, 7, 9]
    assert select_label_indices([3, 7], 6) == [3, 7]
    assert select_label_indices(range(5), None) == [0, 1, 2, 3, 4]
    assert select_label_indices(range(5), 0) == []


def _series(sid, n_labels, t=6, shape=(4, 4, 4)):
    frames = [Volume(np.full(shape, float(i), dtype=np.float32)) for i in range(t)]
    labels = {i: LabelMap(np.ones(shape)) for i in range(n_labels)}
    return SubjectRecord(sid), TimeSeries(frames, phases_from_lengths((t, 0, 0)), labels, sid)


def test_sample_epoch_one_per_subject():
    index = DatasetIndex([_series(f"s{i}", i % 3 + 1) for i in range(7)], "train")
    rng = np.random.default_rng(0)
    for _ in range(20):
        picks = sample_epoch(index, rng)
        assert sorted(p[0] for p in picks) == sorted(index.ids)


def test_sample_epoch_single_label_is_fixed_but_shuffled():
    index = DatasetIndex([_series(f"s{i}", 1) for i in range(6)], "train")
    orders = {tuple(p[0] for p in sample_epoch(index, np.random.default_rng(s))) for s in range(10)}
    frames = {p[1] for s in range(10) for p in sample_epoch(index, np.random.default_rng(s))}
    assert len(orders) > 1 and frames == {0}


def test_sample_epoch_uniform_over_labels():
    index = DatasetIndex([_series("s0", 3)], "train")
    rng = np.random.default_rng(0)
    counts = Counter(sample_epoch(index, rng)[0][1] for _ in range(30_000))
    assert set(counts) == {0, 1, 2}
    assert all(abs(c - 10_000) <= 300 for c in counts.values())


def test_sample_epoch_skips_unlabeled():
    index = DatasetIndex([_series("a", 2), _series("b", 0)], "train")
    with pytest.warns(UserWarning):
        picks = sample_epoch(index, np.random.default_rng(0))
    assert [p[0] for p in picks] == ["a"]
    with pytest.raises(ValueError):
        sample_epoch(DatasetIndex([_series("a", 2)], "val"), np.random.default_rng(0))


def test_roles_are_disjoint():
    a = DatasetIndex([_series("a", 1)], "train")
    b = DatasetIndex([_series("a", 1)], "val")
    with pytest.raises(ValueError):
        check_disjoint(a, b)
    with pytest.raises(ValueError):
        DatasetIndex([_series("a", 1), _series("a", 1)], "train")


# -- tiny end-to-end runs -------------------------------------------------------

PH = PhantomConfig(grid=(16, 16, 16), radius_range=(5.0, 6.5), thickness_range=(2.0, 3.0),
                   center_jitter=0.5, motion_amplitude=0.5, frames=3, phase_lengths=(1, 1, 1))


@pytest.fixture(scope="module")
def tiny_data():
    subs = [generate_subject(PH, np.random.default_rng([7, i]), f"p{i}") for i in range(3)]
    cfg = TrainConfig.desk(epochs=30, target_shape=(16, 16, 16), batch_size=2, loss="CE",
                           model=UNetConfig(levels=2, base_width=4))
    return cfg, build_index(subs[:2], "train", cfg), build_index(subs[2:], "val", cfg)


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    cfg, tr, va = tiny_data
    out = tmp_path_factory.mktemp("run")
    return train(cfg, tr, va, out), out


def test_smoke_training_reduces_loss(tiny_run):
    result, _ = tiny_run
    assert result.history[-1]["loss"] < result.history[0]["loss"]


def test_best_checkpoint_is_argmax(tiny_run, tiny_data):
    cfg, _, va = tiny_data
    result, _ = tiny_run
    vals = [r["val_dice"] for r in result.history]
    best = int(np.argmax(vals))  # first maximum
    assert result.checkpoint.epoch == best
    assert result.checkpoint.val_dice == vals[best]
    assert mean_dice(result.network(), va, cfg.threshold) == pytest.approx(vals[best], abs=1e-9)


def test_log_csv(tiny_run):
    result, out = tiny_run
    with open(out / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "loss", "lr", "val_dice"]
    assert len(rows) == 30
    assert [float(r["loss"]) for r in rows] == [h["loss"] for h in result.history]
    assert (out / "best.pt").exists() and (out / "train_config.json").exists()


def test_rerun_is_bit_identical(tiny_data, tiny_run, tmp_path):
    cfg, tr, va = tiny_data
    _, out = tiny_run
    from dataclasses import replace
    train(replace(cfg, epochs=30), tr, va, tmp_path)
    assert (tmp_path / "log.csv").read_bytes() == (out / "log.csv").read_bytes()


def test_nan_loss_aborts(tiny_data, monkeypatch):
    import torch

    import bwseg.trainer as trainer_mod

    cfg, tr, va = tiny_data

    class Broken:
        def __init__(self, config):
            pass

        def __call__(self, output, target):
            return output.sum() * torch.tensor(float("nan")), {}

    monkeypatch.setattr(trainer_mod, "Objective", Broken)
    from dataclasses import replace
    with pytest.raises(TrainingError, match="p0|p1"):
        train(replace(cfg, epochs=1), tr, va)


def test_train_rejects_wrong_roles(tiny_data):
    cfg, tr, va = tiny_data
    with pytest.raises(ValueError):
        train(cfg, va, tr)
