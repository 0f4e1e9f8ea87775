import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score

from oodseg.synthgen import (
    MAX_CONNECTED_DEFORMATION,
    EnvSpec,
    default_env_suite,
    generate_environment,
    generate_sample,
    generate_suite,
    intensity_histograms,
    read_manifest,
    sample_rng,
    write_datasets,
)
from oodseg.volumes import preprocess


def small_spec(**kw):
    base = dict(env_id=0, name="t", n_labeled=3, n_unlabeled=2, volume_shape=(16, 16, 12), seed=5)
    base.update(kw)
    return EnvSpec(**base)


@pytest.fixture(scope="module")
def desk_suite():
    return generate_suite(default_env_suite("desk"))


def test_empty_dataset():
    ds = generate_environment(small_spec(n_labeled=0, n_unlabeled=0))
    assert len(ds) == 0


def test_counts_and_order():
    ds = generate_environment(small_spec())
    assert [s.labeled for s in ds.samples] == [True, True, True, False, False]
    assert all(s.environment_id == 0 for s in ds.samples)
    assert len(ds.labeled_ids) == 3


def test_generation_is_bit_identical():
    a, b = generate_environment(small_spec()), generate_environment(small_spec())
    for sa, sb in zip(a.samples, b.samples):
        assert sa.sample_id == sb.sample_id
        assert sa.volume.voxels.tobytes() == sb.volume.voxels.tobytes()
        if sa.labeled:
            assert sa.mask.voxels.tobytes() == sb.mask.voxels.tobytes()


def test_sample_independent_of_generation_order():
    spec = small_spec()
    late, _ = generate_sample(spec, 4, labeled=False)
    ds = generate_environment(spec)
    assert late.volume.voxels.tobytes() == ds.samples[4].volume.voxels.tobytes()


def test_sample_rng_keyed_by_seed_and_id():
    assert sample_rng(1, "a").random() == sample_rng(1, "a").random()
    assert sample_rng(1, "a").random() != sample_rng(2, "a").random()
    assert sample_rng(1, "a").random() != sample_rng(1, "b").random()


def test_clean_spec_renders_exact_ellipsoid():
    spec = small_spec(noise_std=0.0, bias_strength=0.0, deformation=0.0, foreground_mean=0.9,
                      cue_amplitude=0.0)
    sample, meta = generate_sample(spec, 0, labeled=True)
    grid = np.indices(spec.volume_shape, dtype=np.float64)
    c, r = meta["center"], meta["radii"]
    inside = sum(((grid[a] - c[a]) / r[a]) ** 2 for a in range(3)) <= 1.0
    np.testing.assert_array_equal(sample.mask.voxels.astype(bool), inside)
    np.testing.assert_allclose(sample.volume.voxels[inside], 0.9, rtol=0, atol=1e-7)


def test_infeasible_geometry_rejected():
    with pytest.raises(ValueError):
        generate_environment(small_spec(radius_range=(0.3, 0.6)))
    with pytest.raises(ValueError):
        small_spec(spurious_corr=1.5).validate()
    with pytest.raises(ValueError):
        small_spec(n_labeled=-1).validate()


@pytest.mark.parametrize("scale, shape", [("desk", (32, 32, 24)), ("full", (64, 64, 48))])
def test_default_suite_shapes_and_signs(scale, shape):
    specs = default_env_suite(scale)
    assert [s.volume_shape for s in specs] == [shape] * 3
    assert [np.sign(s.spurious_corr) for s in specs] == [1, 1, -1]
    with pytest.raises(ValueError):
        default_env_suite("huge")


def test_default_suite_foreground_fraction_band(desk_suite):
    for ds in desk_suite:
        for meta in ds.metadata.values():
            assert 0.01 <= meta["foreground_fraction"] <= 0.20


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, MAX_CONNECTED_DEFORMATION))
def test_masks_connected_below_threshold(seed, deformation):
    spec = small_spec(seed=seed, deformation=deformation, n_labeled=1, n_unlabeled=0,
                      volume_shape=(24, 24, 20))
    sample, _ = generate_sample(spec, 0, labeled=True)
    _, n = ndimage.label(sample.mask.voxels)
    assert n == 1


def test_spurious_cue_tracks_organ_size(desk_suite):
    corr = []
    for ds in desk_suite:
        meta = list(ds.metadata.values())
        corr.append(np.corrcoef([m["size_z"] for m in meta], [m["cue"] for m in meta])[0, 1])
    assert corr[0] > 0.3 and corr[1] > 0.3 and corr[2] < -0.3


def test_environments_distinguishable_from_histograms(desk_suite):
    feats, labels = intensity_histograms(desk_suite, bins=32)
    clf = LogisticRegression(max_iter=2000)
    acc = cross_val_score(clf, feats, labels, cv=4).mean()
    assert acc > 1 / 3 + 0.1


def test_manifest_round_trip(tmp_path):
    suite = generate_suite([small_spec(), small_spec(env_id=1, name="u", seed=6)])
    manifest = write_datasets(suite, tmp_path)
    loaded = read_manifest(manifest)
    assert [d.env_id for d in loaded] == [0, 1] and [d.name for d in loaded] == ["t", "u"]
    for a, b in zip(suite, loaded):
        assert a.sample_ids == b.sample_ids and a.labeled_ids == b.labeled_ids
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.volume.voxels, sb.volume.voxels)


def test_manifest_with_preprocessing_hook(tmp_path):
    manifest = write_datasets([generate_environment(small_spec())], tmp_path)

    def hook(volume, raw):
        return preprocess(volume, raw, crop={"origin": (2, 2, 2), "size": (12, 12, 8)},
                          pad_to=(16, 16, 8), foreground_classes=[1])

    ds = read_manifest(manifest, preprocess_fn=hook)[0]
    assert ds.samples[0].volume.shape == (16, 16, 8)
    assert ds.samples[0].mask.shape == (16, 16, 8)
    assert ds.samples[-1].mask is None


def test_manifest_errors(tmp_path):
    (tmp_path / "manifest.txt").write_text("bad header\n")
    with pytest.raises(ValueError, match="header"):
        read_manifest(tmp_path / "manifest.txt")


def test_duplicate_env_ids_rejected():
    with pytest.raises(ValueError):
        generate_suite([small_spec(), small_spec()])
