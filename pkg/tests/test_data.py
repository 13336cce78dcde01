import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcluster_lab.data import (DATASETS, ImageDataset, Phase, Split, TransformSpec, apply_transforms, center_crop,
                                  dataset_files, default_transform, hflip, load_dataset, load_idx, load_raw,
                                  make_synthetic, read_idx, resize_bilinear, sobel, subsample, transform, write_idx,
                                  write_raw)
from deepcluster_lab.errors import ConfigError, DataFormatError, DatasetNotFoundError


def idx_bytes(magic: bytes, dims, payload: bytes) -> bytes:
    return magic + struct.pack(f">{len(dims)}I", *dims) + payload


def naive_sobel(gray):
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    ky = kx.T
    h, w = gray.shape
    g = np.pad(gray, 1, mode="edge")
    dx = np.zeros((h, w))
    dy = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            patch = g[i:i + 3, j:j + 3]
            dx[i, j] = np.sum(patch * kx)
            dy[i, j] = np.sum(patch * ky)
    return dx, dy


# -- IDX ------------------------------------------------------------------------

def test_hand_built_idx_fixture(tmp_path):
    payload = bytes(range(18))
    path = tmp_path / "img.idx"
    path.write_bytes(idx_bytes(b"\x00\x00\x08\x03", [2, 3, 3], payload))
    ds = load_idx(path)
    assert len(ds) == 2
    assert ds.images.shape == (2, 1, 3, 3)
    assert ds.images[1, 0, 0].tolist() == [9, 10, 11]
    assert ds.labels is None


def test_idx_labels_and_gzip(tmp_path):
    (tmp_path / "i.gz").write_bytes(gzip.compress(idx_bytes(b"\x00\x00\x08\x03", [3, 2, 2], bytes(12))))
    (tmp_path / "l").write_bytes(idx_bytes(b"\x00\x00\x08\x01", [3], bytes([2, 0, 1])))
    ds = load_idx(tmp_path / "i.gz", tmp_path / "l", class_count=3)
    assert ds.labels.tolist() == [2, 0, 1]


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "i").write_bytes(idx_bytes(b"\x00\x00\x08\x03", [10, 2, 2], bytes(40)))
    (tmp_path / "l").write_bytes(idx_bytes(b"\x00\x00\x08\x01", [9], bytes(9)))
    with pytest.raises(DataFormatError, match="mismatch"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_bad_magic(tmp_path):
    (tmp_path / "i").write_bytes(idx_bytes(b"\x00\x00\x08\x02", [2, 9], bytes(18)))
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "i")
    (tmp_path / "j").write_bytes(idx_bytes(b"\x01\x00\x08\x03", [1, 1, 1], bytes(1)))
    with pytest.raises(DataFormatError, match="magic"):
        read_idx(tmp_path / "j")


def test_idx_truncated_and_trailing(tmp_path):
    (tmp_path / "t").write_bytes(idx_bytes(b"\x00\x00\x08\x03", [2, 3, 3], bytes(17)))
    with pytest.raises(DataFormatError, match="truncated"):
        read_idx(tmp_path / "t")
    (tmp_path / "x").write_bytes(idx_bytes(b"\x00\x00\x08\x03", [2, 3, 3], bytes(19)))
    with pytest.raises(DataFormatError, match="trailing"):
        read_idx(tmp_path / "x")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_idx_roundtrip(n, size, seed):
    import tempfile
    from pathlib import Path
    arr = np.random.default_rng(seed).integers(0, 256, (n, size, size), dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        write_idx(Path(d) / "a", arr)
        assert np.array_equal(read_idx(Path(d) / "a"), arr)


def test_raw_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (4, 3, 32, 32), dtype=np.uint8)
    write_raw(tmp_path / "x.u8", imgs, tmp_path / "y.u8", [1, 2, 3, 4])
    ds = load_raw(tmp_path / "x.u8", tmp_path / "y.u8", class_count=10)
    assert np.array_equal(ds.images, imgs)
    assert ds.labels.tolist() == [1, 2, 3, 4]
    (tmp_path / "bad.u8").write_bytes(bytes(100))
    with pytest.raises(DataFormatError):
        load_raw(tmp_path / "bad.u8")


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        ImageDataset(np.zeros((2, 1, 3, 3), np.uint8), np.array([0, 5]), class_count=3)
    with pytest.raises(DataFormatError):
        ImageDataset(np.zeros((2, 1, 3, 3), np.uint8), np.array([0]))
    with pytest.raises(DataFormatError):
        ImageDataset(np.zeros((2, 1, 3, 3), np.float32))


def test_registry_layout_and_missing_dataset(tmp_path, monkeypatch):
    img, lbl = dataset_files("fmnist", Split.TEST, tmp_path)
    assert img == tmp_path / "fmnist" / "t10k-images-idx3-ubyte"
    assert lbl == tmp_path / "fmnist" / "t10k-labels-idx1-ubyte"
    monkeypatch.setenv("DCL_DATA_ROOT", str(tmp_path))
    with pytest.raises(DatasetNotFoundError, match="DCL_DATA_ROOT"):
        load_dataset("fmnist")
    with pytest.raises(ConfigError):
        load_dataset("imagenet")


def test_load_dataset_from_env_root(tmp_path, monkeypatch):
    d = tmp_path / "fmnist"
    d.mkdir()
    imgs = np.random.default_rng(0).integers(0, 256, (20, 28, 28), dtype=np.uint8)
    write_idx(d / "train-images-idx3-ubyte", imgs)
    write_idx(d / "train-labels-idx1-ubyte", np.arange(20) % 10)
    monkeypatch.setenv("DCL_DATA_ROOT", str(tmp_path))
    ds = load_dataset("fmnist", max_samples=7, seed=3)
    assert len(ds) == 7 and ds.class_count == DATASETS["fmnist"]["classes"]
    again = load_dataset("fmnist", max_samples=7, seed=3)
    assert np.array_equal(ds.images, again.images)


def test_subsample_is_seeded_first_n():
    ds = make_synthetic(50, seed=0)
    sub = subsample(ds, 10, seed=4)
    keep = np.sort(np.random.default_rng(4).permutation(50)[:10])
    assert np.array_equal(sub.images, ds.images[keep])
    assert subsample(ds, None) is ds


def test_synthetic_shares_prototypes_across_splits():
    a = make_synthetic(200, split=Split.TRAIN)
    b = make_synthetic(200, split=Split.TEST)
    assert not np.array_equal(a.images, b.images)
    ma = a.images[a.labels == 3].mean(axis=0)
    mb = b.images[b.labels == 3].mean(axis=0)
    assert np.corrcoef(ma.ravel(), mb.ravel())[0, 1] > 0.9


# -- transforms -----------------------------------------------------------------

def test_constant_image_normalizes_to_zero():
    v = 51
    spec = TransformSpec(normalize_mean=(v / 255,), normalize_std=(1.0,))
    out = transform(np.full((2, 1, 28, 28), v, np.uint8), spec)
    np.testing.assert_allclose(out, 0.0, atol=1e-7)


def test_center_crop_indices():
    x = np.arange(36 * 36, dtype=np.float64).reshape(1, 1, 36, 36)
    c = center_crop(x, 32)
    assert np.array_equal(c, x[..., 2:34, 2:34])
    assert c[0, 0, 0, 0] == 2 * 36 + 2
    with pytest.raises(ConfigError):
        center_crop(x, 40)


def test_resize_identity_and_constant():
    x = np.random.default_rng(0).random((1, 2, 7, 7))
    assert resize_bilinear(x, 7) is x
    up = resize_bilinear(np.full((1, 1, 5, 5), 3.0), 9)
    np.testing.assert_allclose(up, 3.0)
    assert up.shape == (1, 1, 9, 9)


def test_transform_spec_validation():
    with pytest.raises(ConfigError):
        TransformSpec(resize_to=28, crop_size=32)
    with pytest.raises(ConfigError):
        TransformSpec(normalize_std=(0.0,))


def test_default_crop_per_dataset():
    assert default_transform(1, 28).crop_size == 28
    spec = default_transform(3, 32, sobel=True)
    assert spec.crop_size == 32 and spec.normalize_mean == (0.5, 0.5, 0.5)


def test_cluster_phase_deterministic_and_batch_invariant():
    ds = make_synthetic(37)
    spec = default_transform(1, 28)
    a = np.concatenate([b for _, b in apply_transforms(ds, spec, Phase.CLUSTER, batch_size=5)])
    b = np.concatenate([b for _, b in apply_transforms(ds, spec, Phase.CLUSTER, batch_size=64, seed=9)])
    assert np.array_equal(a, b)


def test_train_phase_flips_seeded_and_batch_invariant():
    ds = make_synthetic(40)
    spec = default_transform(1, 28)
    clean = transform(ds.images, spec)
    a = np.concatenate([b for _, b in apply_transforms(ds, spec, Phase.TRAIN, seed=1, batch_size=7)])
    b = np.concatenate([b for _, b in apply_transforms(ds, spec, Phase.TRAIN, seed=1, batch_size=40)])
    assert np.array_equal(a, b)
    flipped = [not np.array_equal(a[i], clean[i]) for i in range(40)]
    assert 5 < sum(flipped) < 35
    for i in range(40):
        assert np.array_equal(a[i], hflip(clean[i]) if flipped[i] else clean[i])


def test_flip_involution():
    x = np.random.default_rng(0).random((2, 3, 5, 6))
    assert np.array_equal(hflip(hflip(x)), x)


# -- sobel ------------------------------------------------------------------------

def test_sobel_constant_image_zero():
    out = sobel(np.full((2, 3, 8, 8), 0.7))
    assert out.shape == (2, 2, 8, 8)
    assert not np.any(out)


def test_sobel_vertical_step_edge():
    img = np.zeros((1, 1, 6, 6))
    img[..., 3:] = 1.0
    out = sobel(img)
    dx, dy = out[0]
    assert not np.any(dy)
    assert np.all(dx[:, 2:4] == 4.0)
    assert not np.any(dx[:, [0, 1, 4, 5]])


def test_sobel_luminance_then_kernels_match_loop_oracle():
    rng = np.random.default_rng(2)
    rgb = rng.random((1, 3, 7, 9))
    gray = 0.299 * rgb[0, 0] + 0.587 * rgb[0, 1] + 0.114 * rgb[0, 2]
    dx, dy = naive_sobel(gray)
    out = sobel(rgb)
    np.testing.assert_allclose(out[0, 0], dx, atol=1e-12)
    np.testing.assert_allclose(out[0, 1], dy, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 10**6))
def test_sobel_linearity(a, seed):
    img = np.random.default_rng(seed).random((1, 1, 6, 6))
    np.testing.assert_allclose(sobel(a * img), a * sobel(img), atol=1e-5)


def test_sobel_rejects_channel_count():
    with pytest.raises(ValueError):
        sobel(np.zeros((1, 2, 4, 4)))


def test_sobel_in_transform_pipeline():
    spec = default_transform(3, 32, sobel=True)
    out = transform(np.zeros((2, 3, 32, 32), np.uint8), spec)
    assert out.shape == (2, 2, 32, 32) and out.dtype == np.float32
