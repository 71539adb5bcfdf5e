import numpy as np
import pytest

from vhlsim.virtual import (
    VirtualSpec,
    generate_noise_dataset,
    generate_vfa_features,
    load_virtual,
    nearest_mean_accuracy,
    noise_class_means,
    save_virtual,
    upsample_nearest,
)


def test_upsample_identity():
    img = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(upsample_nearest(img, 1), img)


def test_upsample_single_pixel():
    assert upsample_nearest(np.array([[7.5]]), 3).tolist() == [[7.5] * 3] * 3


def test_upsample_blocks():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = upsample_nearest(np.array([[a, b], [c, d]]), 2)
    expected = [[a, a, b, b], [a, a, b, b], [c, c, d, d], [c, c, d, d]]
    assert out.tolist() == expected


def test_upsample_keeps_channels():
    img = np.arange(8.0).reshape(2, 2, 2)
    out = upsample_nearest(img, 3)
    assert out.shape == (6, 6, 2)
    assert np.all(out[3:, :3, 1] == img[1, 0, 1])


def test_default_geometry_is_32x32():
    spec = VirtualSpec(classes=2, per_class=2)
    ds = generate_noise_dataset(spec)
    assert spec.side == 32
    assert ds.features.shape == (4, 32 * 32 * 3)


def test_tiny_sigma_gives_upsampled_means():
    spec = VirtualSpec(classes=3, per_class=4, base_side=2, up_factor=2, channels=1, sigma=1e-12, seed=5)
    ds = generate_noise_dataset(spec)
    means = noise_class_means(spec)
    np.testing.assert_allclose(ds.features, means[ds.labels], atol=1e-9)
    # every 2x2 block of a sample is constant
    grid = ds.features[0].reshape(4, 4)
    assert grid[0, 0] == grid[1, 1] and grid[2, 3] == grid[3, 2]


def test_deterministic_and_uniform_labels():
    spec = VirtualSpec(classes=4, per_class=5, base_side=2, up_factor=2, channels=2, seed=3)
    a, b = generate_noise_dataset(spec), generate_noise_dataset(spec)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.bincount(a.labels).tolist() == [5] * 4


def test_class_means_respect_separation():
    spec = VirtualSpec(classes=10, per_class=1, base_side=2, up_factor=1, channels=1, mean_separation=10.0, seed=1)
    base = noise_class_means(spec)
    d = np.linalg.norm(base[:, None] - base[None], axis=2)
    assert d[~np.eye(10, dtype=bool)].min() >= 10.0


@pytest.mark.parametrize("classes", [2, 10])
def test_separability_certificate(classes):
    spec = VirtualSpec(classes=classes, per_class=50, mean_separation=10.0, sigma=1.0, seed=classes)
    assert nearest_mean_accuracy(generate_noise_dataset(spec)) == 1.0


def test_vfa_shape_and_determinism():
    a = generate_vfa_features(10, 64, 7, seed=2)
    b = generate_vfa_features(10, 64, 7, seed=2)
    assert a.features.shape == (70, 64)
    assert a.features.tobytes() == b.features.tobytes()


@pytest.mark.parametrize("classes", [2, 10])
def test_vfa_separable(classes):
    assert nearest_mean_accuracy(generate_vfa_features(classes, 16, 40, 10.0, 1.0, seed=4)) == 1.0


def test_vfa_class_means_within_standard_error():
    from vhlsim.virtual import vfa_class_means

    sigma, per_class = 1.0, 256
    ds = generate_vfa_features(3, 8, per_class, 10.0, sigma, seed=11)
    mu = vfa_class_means(3, 8, 10.0, seed=11)
    bound = 4 * sigma / np.sqrt(per_class)
    for c in range(3):
        err = np.abs(ds.features[ds.labels == c].mean(axis=0) - mu[c])
        assert err.max() < bound


def test_container_roundtrip(tmp_path):
    spec = VirtualSpec(classes=3, per_class=4, base_side=2, up_factor=2, channels=1, seed=0)
    ds = generate_noise_dataset(spec)
    path = tmp_path / "virtual.bin"
    save_virtual(ds, path)
    raw = path.read_bytes()
    assert raw[:12] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little") + (16).to_bytes(4, "little")
    assert len(raw) == 12 + 12 * 16 * 4
    back = load_virtual(path)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_allclose(back.features, ds.features.astype(np.float32))
