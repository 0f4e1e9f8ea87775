import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oodseg.volumes import (
    MAGIC,
    AugmentationConfig,
    LabelMask,
    Sample,
    Volume,
    VolumeFormatError,
    augment,
    augment_arrays,
    binarize_labels,
    crop_fixed,
    load_raw_mask,
    load_raw_volume,
    normalize_intensity,
    pad_to_shape,
    preprocess,
    read_raw_array,
    write_raw_volume,
)


def test_raw_round_trip(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    write_raw_volume(tmp_path / "v.oodv", arr)
    np.testing.assert_array_equal(read_raw_array(tmp_path / "v.oodv"), arr)


def test_raw_layout_is_x_fastest(tmp_path):
    arr = np.zeros((2, 2, 1), np.float32)
    arr[1, 0, 0] = 7.0
    write_raw_volume(tmp_path / "v.oodv", arr)
    data = (tmp_path / "v.oodv").read_bytes()
    payload = np.frombuffer(data[len(MAGIC) + 12:], "<f4")
    # second value in file order is x=1, y=0, z=0
    assert payload.tolist() == [0.0, 7.0, 0.0, 0.0]


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXXX\x00" + b[6:], "magic"),
    (lambda b: b[:-4], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:8], "magic or header"),
])
def test_raw_read_rejects_malformed(tmp_path, mutate, msg):
    path = tmp_path / "v.oodv"
    write_raw_volume(path, np.ones((2, 2, 2), np.float32))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(VolumeFormatError, match=msg):
        read_raw_array(path)


def test_load_volume_rejects_non_finite(tmp_path):
    arr = np.ones((2, 2, 2), np.float32)
    arr[0, 0, 0] = np.nan
    write_raw_volume(tmp_path / "v.oodv", arr)
    with pytest.raises(VolumeFormatError, match="non-finite"):
        load_raw_volume(tmp_path / "v.oodv")


def test_load_mask_requires_binary(tmp_path):
    write_raw_volume(tmp_path / "m.oodv", np.full((2, 2, 2), 2.0, np.float32))
    with pytest.raises(VolumeFormatError):
        load_raw_mask(tmp_path / "m.oodv")


def test_write_requires_3d(tmp_path):
    with pytest.raises(ValueError):
        write_raw_volume(tmp_path / "v.oodv", np.zeros((2, 2)))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_raw_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("raw") / "v.oodv"
    write_raw_volume(path, arr)
    np.testing.assert_array_equal(read_raw_array(path), arr)


def test_sample_shape_check():
    with pytest.raises(ValueError):
        Sample(Volume(np.zeros((2, 2, 2))), 0, "a", LabelMask(np.zeros((2, 2, 3))))


def test_crop_and_pad():
    arr = np.arange(4 * 4 * 4).reshape(4, 4, 4)
    c = crop_fixed(arr, (1, 0, 2), (2, 3, 2))
    np.testing.assert_array_equal(c, arr[1:3, 0:3, 2:4])
    with pytest.raises(ValueError, match="exceeds"):
        crop_fixed(arr, (3, 0, 0), (2, 1, 1))
    p = pad_to_shape(np.ones((1, 2, 2)), (4, 3, 2))
    assert p.shape == (4, 3, 2)
    # odd margin: floor on the low side
    assert p[1, 0, 0] == 1 and p[0].sum() == 0 and p[2].sum() == 0
    assert p[:, 2].sum() == 0
    with pytest.raises(ValueError):
        pad_to_shape(np.ones((5, 1, 1)), (4, 4, 4))


def test_crop_pad_keep_wrappers():
    v = Volume(np.ones((4, 4, 4)), spacing=(2.0, 1.0, 1.0))
    out = pad_to_shape(crop_fixed(v, (0, 0, 0), (2, 2, 2)), (3, 3, 3))
    assert isinstance(out, Volume) and out.spacing == (2.0, 1.0, 1.0)


def test_binarize_labels():
    raw = np.array([0, 1, 2, 3, 2]).reshape(5, 1, 1)
    m = binarize_labels(raw, [2, 3])
    assert m.voxels.ravel().tolist() == [0, 0, 1, 1, 1]


def test_normalize_intensity():
    v = normalize_intensity(np.array([1.0, 2.0, 3.0, 6.0]).reshape(2, 2, 1))
    assert abs(v.mean()) < 1e-6 and abs(v.std() - 1) < 1e-6
    const = normalize_intensity(np.full((2, 2, 2), 5.0))
    assert np.all(const == 0)


def test_preprocess_pipeline():
    vol = Volume(np.random.default_rng(0).normal(size=(6, 6, 6)))
    raw = np.zeros((6, 6, 6))
    raw[2:4, 2:4, 2:4] = 5
    v, m = preprocess(vol, raw, crop={"origin": (1, 1, 1), "size": (4, 4, 4)}, pad_to=(6, 6, 6),
                      foreground_classes=[5])
    assert v.shape == (6, 6, 6) and m.voxels.sum() == 8


def _blob():
    vol = np.zeros((12, 12, 12), np.float32)
    vol[3:9, 4:8, 4:8] = 1.0
    return vol, (vol > 0).astype(np.uint8)


def test_augment_deterministic_for_seed():
    vol, mask = _blob()
    cfg = AugmentationConfig(enable_bias_field=True, enable_noise=True)
    a = augment_arrays(vol, mask, cfg, np.random.default_rng(5))
    b = augment_arrays(vol, mask, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_disabled_augmentation_is_identity():
    vol, mask = _blob()
    out, m = augment_arrays(vol, mask, AugmentationConfig.disabled(), 0)
    np.testing.assert_array_equal(out, vol)
    np.testing.assert_array_equal(m, mask)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augmented_mask_stays_binary_and_aligned(seed):
    vol, mask = _blob()
    out, m = augment_arrays(vol, mask, AugmentationConfig(), seed)
    assert out.shape == vol.shape and m.shape == mask.shape
    assert set(np.unique(m)) <= {0, 1}
    assert np.isfinite(out).all()


def test_flip_only_moves_volume_and_mask_together():
    vol, mask = _blob()
    cfg = AugmentationConfig.disabled(enable_flip=True, flip_axes=(0, 1, 2))
    for seed in range(8):
        out, m = augment_arrays(vol, mask, cfg, seed)
        np.testing.assert_array_equal(out > 0, m.astype(bool))


def test_augment_sample_wrapper():
    vol, mask = _blob()
    s = Sample(Volume(vol), 1, "x", LabelMask(mask))
    out = augment(s, AugmentationConfig(), 3)
    assert out.sample_id == "x" and out.mask.shape == s.mask.shape


@pytest.mark.parametrize("kw", [
    {"rotation_degrees": (5.0, -5.0)},
    {"scale_range": (0.0, 1.0)},
    {"flip_axes": (3,)},
    {"motion_max_weight": 1.5},
])
def test_augmentation_config_validation(kw):
    with pytest.raises(ValueError):
        AugmentationConfig(**kw)
