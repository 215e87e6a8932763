import numpy as np
import pytest

from scaa.synth import (OrganSpec, PhantomSpec, PlacementError, VolumeSample, augment, elastic_transform,
                        generate, jitter, make_dataset, normalize_intensity, read_spec, shift_volume, write_spec)


def test_generate_deterministic():
    a, b = generate(PhantomSpec(seed=3)), generate(PhantomSpec(seed=3))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = generate(PhantomSpec(seed=4))
    assert a.image.tobytes() != c.image.tobytes()


def test_every_class_present_and_label_range():
    for seed in range(5):
        s = generate(PhantomSpec(seed=seed))
        assert s.image.shape == (64, 64, 64)
        assert s.labels.max() <= 3
        for c in (1, 2, 3):
            assert (s.labels == c).sum() >= 1
        assert np.all(np.isfinite(s.image))


def test_single_ellipsoid_analytic_membership():
    spec = PhantomSpec(shape=(32, 40, 48), organs=(OrganSpec("ellipsoid", (4.0, 9.0), (100.0, 100.0)),),
                       noise=0.0, seed=11)
    s = generate(spec)
    p = s.placements[0]
    zz, yy, xx = np.meshgrid(*(np.arange(n) for n in spec.shape), indexing="ij")
    (cz, cy, cx), (az, ay, ax) = p["center"], p["semi_axes"]
    inside = ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    np.testing.assert_array_equal(s.labels == 1, inside)
    assert np.all(s.image[inside] == s.image[inside][0])  # noise free, constant band


def test_organs_do_not_touch():
    from scipy import ndimage

    s = generate(PhantomSpec(seed=7))
    for c in (1, 2, 3):
        grown = ndimage.binary_dilation(s.labels == c)
        others = (s.labels > 0) & (s.labels != c)
        assert not (grown & others).any()


def test_intensity_bands_distinct():
    s = generate(PhantomSpec(seed=1))
    means = [s.image[s.labels == c].mean() for c in range(4)]
    # gland ~-57 (below the body), background + body, liver ~115, cord ~385
    assert means[3] < means[0] < means[1] < means[2]
    body = generate(PhantomSpec(seed=1, noise=0.0)).image[32, 32, 4:8]  # body voxels off the organs
    assert means[3] < body.min() - 50


def test_infeasible_placement():
    spec = PhantomSpec(shape=(16, 16, 16), organs=(OrganSpec("ellipsoid", (5.0, 5.0), (1.0, 1.0)),) * 4,
                       max_tries=5)
    with pytest.raises(PlacementError):
        generate(spec)


def test_spec_file_roundtrip(tmp_path):
    spec = PhantomSpec(shape=(64, 64, 32), noise=3.5, seed=9,
                       organs=(OrganSpec("tube", (2.0, 3.0), (300.0, 310.0)), OrganSpec("blob", (3.0, 4.0), (5.0, 6.0))))
    path = tmp_path / "phantom.cfg"
    write_spec(spec, path)
    assert read_spec(path) == spec
    path.write_text("[phantom]\nseed = 4\n")
    assert read_spec(path) == PhantomSpec(seed=4)
    path.write_text("[phantom]\nnum_classes = 2\n[class1]\nfamily = tube\nsize = 1 2\nintensity = 1 2\n")
    with pytest.raises(ValueError, match="num_classes"):
        read_spec(path)
    path.write_text("[class1]\nfamily = cube\n")
    with pytest.raises(ValueError):
        read_spec(path)


def test_normalize_intensity():
    x = np.array([-500.0, -100.0, 200.0, 500.0, 900.0])
    np.testing.assert_allclose(normalize_intensity(x), [-1, -1, 0, 1, 1])


# ---------------------------------------------------------------- augmentation

def test_elastic_zero_magnitude_is_identity():
    s = generate(PhantomSpec(seed=2))
    e = elastic_transform(s, magnitude=0.0, seed=5)
    np.testing.assert_array_equal(e.image, s.image)
    np.testing.assert_array_equal(e.labels, s.labels)


def test_elastic_class_volume_change_bounded():
    for seed in range(10):
        s = generate(PhantomSpec(seed=seed))
        e = elastic_transform(s, seed=100 + seed)
        for c in (1, 2, 3):
            before, after = (s.labels == c).sum(), (e.labels == c).sum()
            assert abs(after / before - 1) < 0.20


def test_elastic_keeps_label_image_alignment():
    organs = (OrganSpec("ellipsoid", (8.0, 10.0), (300.0, 300.0)),)
    s = generate(PhantomSpec(organs=organs, noise=0.0, background=(0.0, 0.0), body=(0.0, 0.0), seed=3))
    e = elastic_transform(s, magnitude=1.5, seed=8)
    # fully-in-band voxels lie inside the warped label
    core = e.image > 299.0
    assert core.sum() > 0
    assert np.all(e.labels[core] == 1)
    # a labelled voxel's nearest sample is in the organ, so its trilinear weight is >= 1/8
    assert e.image[e.labels == 1].min() >= 300.0 / 8 - 1e-3


def test_elastic_deterministic():
    s = generate(PhantomSpec(seed=2))
    a, b = elastic_transform(s, seed=1), elastic_transform(s, seed=1)
    assert a.image.tobytes() == b.image.tobytes()


def test_jitter_identity_and_shift():
    s = generate(PhantomSpec(seed=5))
    j = jitter(s, 0.0, 0, seed=1)
    np.testing.assert_array_equal(j.image, s.image)
    np.testing.assert_array_equal(j.labels, s.labels)
    j = jitter(s, 0.0, (1, 0, 0), seed=1)
    before = np.argwhere(s.labels > 0)
    after = np.argwhere(j.labels > 0)
    keep = before[before[:, 0] < 63]
    np.testing.assert_array_equal(after, keep + [1, 0, 0])
    assert np.all(j.labels[0] == 0)


def test_jitter_random_finite():
    s = generate(PhantomSpec(seed=5))
    j = jitter(s, 5.0, 2, seed=4)
    assert np.all(np.isfinite(j.image))
    assert j.image.shape == s.image.shape
    assert j.labels.max() <= 3


def test_shift_volume_negative_and_large():
    a = np.arange(5)
    np.testing.assert_array_equal(shift_volume(a, (-2,)), [2, 3, 4, 0, 0])
    np.testing.assert_array_equal(shift_volume(a, (7,)), [0] * 5)


def test_augment_and_dataset():
    data = make_dataset(PhantomSpec(), 2, base_seed=10)
    assert [d.id for d in data] == ["phantom-10", "phantom-11"]
    a = augment(data[0], seed=3)
    b = augment(data[0], seed=3)
    assert a.labels.tobytes() == b.labels.tobytes()
    assert isinstance(a, VolumeSample)
