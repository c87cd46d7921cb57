import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bwseg.inference import largest_component, predict, predict_series, segment_probability
from bwseg.metrics import consecutive_dice
from bwseg.model import UNetConfig, build_unet
from bwseg.volume import LabelMap, TimeSeries, Volume, phases_from_lengths

from conftest import ball
from oracles import flood_components


def test_ball_probability_gives_ball():
    b = ball((20, 20, 20), (10, 10, 10), 5)
    out = segment_probability(np.where(b, 0.9, 0.1))
    assert np.array_equal(out.mask, b)


def test_threshold_is_inclusive():
    p = np.zeros((4, 4, 4))
    p[1, 1, 1] = 0.5
    assert segment_probability(p, 0.5).count() == 1
    assert segment_probability(p, 0.0).count() == 64


def test_keeps_larger_blob():
    m = np.zeros((30, 30, 30), dtype=bool)
    m[2:7, 2:7, 2:6] = True  # 100
    m[20:25, 20:24, 20:22] = True  # 40
    out = largest_component(m)
    assert out.count() == 100 and out.mask[2, 2, 2]


def test_tie_goes_to_lowest_voxel():
    m = np.zeros((20, 20, 20), dtype=bool)
    m[12:17, 12:17, 12:14] = True
    m[1:6, 1:6, 1:3] = True
    out = largest_component(m)
    assert out.count() == 50 and out.mask[1, 1, 1] and not out.mask[12, 12, 12]


def test_diagonal_contact_is_connected_at_26_only():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[1, 1, 1] = m[2, 2, 2] = m[3, 3, 3] = True
    m[0, 4, 4] = True
    assert largest_component(m, 26).count() == 3
    assert largest_component(m, 6).count() == 1
    with pytest.raises(ValueError):
        largest_component(m, 8)


def test_empty_input():
    out = largest_component(np.zeros((4, 4, 4)))
    assert out.is_empty()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([6, 18, 26]), st.floats(0.2, 0.8))
def test_matches_flood_fill(seed, conn, density):
    m = np.random.default_rng(seed).random((8, 8, 8)) < density
    labels, _ = flood_components(m, conn)
    out = largest_component(m, conn).mask
    if not m.any():
        assert not out.any()
        return
    sizes = np.bincount(labels.ravel())[1:]
    first = int(np.flatnonzero(sizes == sizes.max())[0]) + 1
    assert np.array_equal(out, labels == first)
    # connected, subset, idempotent
    assert np.all(m[out])
    assert flood_components(out, conn)[1] == 1
    assert np.array_equal(largest_component(out, conn).mask, out)


def _network():
    return build_unet(UNetConfig(levels=2, base_width=2), seed=0)


def _series(frames):
    t = len(frames)
    return TimeSeries([Volume(f) for f in frames], phases_from_lengths((t, 0, 0)))


def test_predict_series_stride(rng):
    frames = [rng.random((8, 8, 8)).astype(np.float32) for _ in range(10)]
    net = _network()
    assert predict_series(net, _series(frames), stride=2).indices == [0, 2, 4, 6, 8]
    assert predict_series(net, _series(frames), stride=1).indices == list(range(10))
    with pytest.raises(ValueError):
        predict_series(net, _series(frames), stride=0)


def test_predict_series_matches_single_frame_prediction(rng):
    frames = [rng.random((8, 8, 8)).astype(np.float32) for _ in range(4)]
    net = _network()
    out = predict_series(net, _series(frames), stride=1, threshold=0.45)
    for t, f in enumerate(frames):
        assert np.array_equal(out.masks[t].mask, predict(net, Volume(f), 0.45).mask)


def test_identical_frames_identical_masks(rng):
    f = rng.random((8, 8, 8)).astype(np.float32)
    out = predict_series(_network(), _series([f] * 6), stride=1, threshold=0.3)
    masks = [out.masks[t] for t in out.indices]
    assert all(np.array_equal(m.mask, masks[0].mask) for m in masks)
    if not masks[0].is_empty():
        assert consecutive_dice(masks) == [100.0] * 5


def test_empty_prediction_flagged():
    f = np.zeros((8, 8, 8), dtype=np.float32)
    out = predict_series(_network(), _series([f, f]), stride=1, threshold=1.01)
    assert out.empty_frames == [0, 1]
    assert all(out.masks[t].is_empty() for t in (0, 1))


def test_prediction_keeps_geometry():
    vol = Volume(np.zeros((8, 8, 8), dtype=np.float32), (2.0, 2.0, 4.0))
    out = predict(_network(), vol, threshold=0.0)
    assert out.spacing == (2.0, 2.0, 4.0) and out.shape == (8, 8, 8)


def test_predict_restores_training_mode():
    net = _network()
    net.train()
    predict(net, Volume(np.zeros((8, 8, 8), dtype=np.float32)))
    assert net.training
    assert torch.is_grad_enabled()
