import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bwseg.volume import (LabelMap, SubjectRecord, TimeSeries, Volume, VolumeIOError,
                          centered_margins, crop_or_pad, load_labelmap, load_volume,
                          phases_from_lengths, read_series, save_volume, write_series)


def test_volume_rejects_nan_and_bad_shape():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))


def test_volume_is_immutable():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_labelmap_binary_only():
    LabelMap(np.ones((2, 2, 2), dtype=bool))
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2, 2), 2))


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int16, np.uint8])
def test_roundtrip_bit_exact(tmp_path, rng, dtype):
    data = (rng.normal(size=(5, 6, 7)) * 100).astype(dtype)
    v = Volume(data, (3.0, 3.0, 6.0))
    path = tmp_path / "v.nii.gz"
    save_volume(v, path)
    back = load_volume(path)
    assert back.data.dtype == data.dtype
    assert np.array_equal(back.data, data)
    assert back.spacing == (3.0, 3.0, 6.0)


def test_missing_file_names_path(tmp_path):
    path = tmp_path / "absent.nii"
    with pytest.raises(VolumeIOError, match="absent.nii"):
        load_volume(path)


def test_corrupt_file(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"not a nifti")
    with pytest.raises(VolumeIOError, match="bad.nii"):
        load_volume(path)


def test_labelmap_binarized_on_load(tmp_path):
    data = np.array([0.0, 0.4, 0.5, 0.51, 1.0] * 2, dtype=np.float32).reshape(2, 5, 1)
    save_volume(Volume(data), tmp_path / "l.nii")
    lab = load_labelmap(tmp_path / "l.nii")
    assert lab.data.reshape(-1).tolist() == [0, 0, 0, 1, 1] * 2


def test_crop_or_pad_examples():
    v = Volume(np.ones((96, 96, 64)))
    out = crop_or_pad(v, (112, 112, 80))
    assert out.shape == (112, 112, 80)
    assert out.data.sum() == 96 * 96 * 64
    # 8 voxels of padding each side
    assert out.data[8, 8, 8] == 1 and out.data[7, 8, 8] == 0
    assert crop_or_pad(out, (96, 96, 64)).data.sum() == 96 * 96 * 64


def test_odd_margin_goes_high():
    assert centered_margins(3, 6) == (1, 2)
    assert centered_margins(6, 3) == (-1, -2)
    v = Volume(np.arange(5.0).reshape(5, 1, 1))
    assert crop_or_pad(v, (2, 1, 1)).data.ravel().tolist() == [1.0, 2.0]
    assert crop_or_pad(v, (8, 1, 1)).data.ravel().tolist() == [0, 0, 1, 2, 3, 4, 0, 0]


def test_crop_or_pad_preserves_world_coordinates():
    affine = np.diag([2.0, 2.0, 3.0, 1.0])
    affine[:3, 3] = [10, 20, 30]
    v = Volume(np.zeros((10, 10, 10)), (2, 2, 3), affine)
    out = crop_or_pad(v, (6, 14, 10))
    # voxel (0,0,0) of the input sits at (-2, 2, 0) in the output grid
    world_in = affine @ [0, 0, 0, 1]
    world_out = out.affine @ [-2, 2, 0, 1]
    assert np.allclose(world_in, world_out)


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 9)] * 3), st.tuples(*[st.integers(1, 9)] * 3))
def test_crop_or_pad_shape_and_idempotence(shape, target):
    lab = LabelMap(np.ones(shape, dtype=np.uint8))
    out = crop_or_pad(lab, target)
    assert out.shape == tuple(target)
    assert set(np.unique(out.data)) <= {0, 1}
    again = crop_or_pad(out, target)
    assert np.array_equal(again.data, out.data)


def test_timeseries_validation():
    frames = [Volume(np.zeros((2, 2, 2)))] * 3
    TimeSeries(frames, ["normoxia1", "hyperoxia", "normoxia2"])
    with pytest.raises(ValueError):
        TimeSeries(frames, ["hyperoxia", "normoxia1", "normoxia2"])
    with pytest.raises(ValueError):
        TimeSeries(frames, ["normoxia1"] * 2)
    with pytest.raises(ValueError):
        TimeSeries(frames, ["normoxia1"] * 3, {5: LabelMap(np.zeros((2, 2, 2)))})
    s = TimeSeries(frames, phases_from_lengths((1, 2, 0)))
    assert s.block_lengths() == (1, 2, 0)


def test_series_manifest_roundtrip(tmp_path, rng):
    frames = [Volume(rng.random((4, 4, 4)).astype(np.float32), (3, 3, 3)) for _ in range(4)]
    labels = {1: LabelMap(rng.random((4, 4, 4)) > 0.5, (3, 3, 3))}
    s = TimeSeries(frames, phases_from_lengths((2, 1, 1)), labels, "s01")
    rec = SubjectRecord("s01", "FGR", "twin", (33, 2))
    path = write_series(s, tmp_path, rec)
    manifest = json.loads(path.read_text())
    assert set(manifest) >= {"subject_id", "cohort", "plurality", "frames", "phase", "labels"}
    back, rec2 = read_series(path)
    assert rec2 == rec
    assert back.phase == s.phase
    assert all(np.array_equal(a.data, b.data) for a, b in zip(back.frames, s.frames))
    assert np.array_equal(back.labels[1].data, labels[1].data)
