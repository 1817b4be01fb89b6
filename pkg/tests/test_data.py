import gzip
import struct

import numpy as np
import pytest

from knockoff_saliency.data import (
    BadMagicError, BlankImageError, BoundingBox, CountMismatchError, Dataset, EmptyDatasetError,
    TruncatedFileError, binarize, ground_truth_box, load_idx, load_mnist, load_variant, mask_box,
    parse_idx_images, parse_idx_labels, subset, write_idx,
)


def _toy(n=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8), rng.integers(0, 10, size=n).astype(np.uint8)


def test_idx_round_trip(tmp_path):
    imgs, labs = _toy()
    write_idx(imgs, labs, tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(np.rint(ds.images * 255).astype(np.uint8), imgs)
    np.testing.assert_array_equal(ds.labels, labs)
    assert ds.images.dtype == np.float32 and ds.images.max() <= 1.0


def test_idx_gzip(tmp_path):
    imgs, labs = _toy()
    write_idx(imgs, labs, tmp_path / "i", tmp_path / "l")
    for name in ("i", "l"):
        (tmp_path / (name + ".gz")).write_bytes(gzip.compress((tmp_path / name).read_bytes()))
        (tmp_path / name).unlink()
    assert len(load_idx(tmp_path / "i", tmp_path / "l")) == 5


def test_header_is_big_endian():
    raw = struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 1, 2, 3])
    np.testing.assert_array_equal(parse_idx_images(raw), [[[0, 1], [2, 3]]])


@pytest.mark.parametrize("raw,err", [
    (struct.pack(">IIII", 0x801, 1, 28, 28), BadMagicError),
    (struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(784), TruncatedFileError),
    (b"\x00\x00", TruncatedFileError),
])
def test_image_errors(raw, err):
    with pytest.raises(err):
        parse_idx_images(raw)


def test_label_errors():
    with pytest.raises(BadMagicError):
        parse_idx_labels(struct.pack(">II", 0x803, 0))
    with pytest.raises(TruncatedFileError):
        parse_idx_labels(struct.pack(">II", 0x801, 3) + b"\x01")


def test_count_mismatch(tmp_path):
    imgs, labs = _toy(4)
    write_idx(imgs, labs[:3], tmp_path / "i", tmp_path / "l")
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="MNIST"):
        load_mnist(tmp_path)


def test_binarize_matches_scalar_loop():
    rng = np.random.default_rng(1)
    imgs = rng.random((3, 28, 28)).astype(np.float32)
    imgs[0, 0, 0] = 0.5
    out = binarize(Dataset(imgs, np.zeros(3, dtype=np.int64))).images
    for idx in np.ndindex(imgs.shape):
        assert out[idx] == (1.0 if imgs[idx] >= 0.5 else 0.0)
    assert out[0, 0, 0] == 1.0


def test_subset_and_empty():
    ds = Dataset(np.zeros((6, 28, 28), np.float32), np.array([3, 8, 1, 3, 5, 8]))
    sub = subset(ds, (3, 8))
    assert len(sub) == 4 and sub.subset == "comp38"
    with pytest.raises(EmptyDatasetError):
        subset(ds, (7,))


def test_box_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        img = (rng.random((28, 28)) < rng.uniform(0.001, 0.05)).astype(np.float32)
        if not img.any():
            with pytest.raises(BlankImageError):
                ground_truth_box(img)
            continue
        rows = [r for r in range(28) if any(img[r, c] > 0.1 for c in range(28))]
        cols = [c for c in range(28) if any(img[r, c] > 0.1 for r in range(28))]
        assert ground_truth_box(img).as_tuple() == (min(rows), min(cols), max(rows), max(cols))


def test_box_monotone_in_threshold():
    rng = np.random.default_rng(3)
    img = rng.random((28, 28))
    prev = None
    for t in np.linspace(0.1, 0.99, 20):
        b = ground_truth_box(img, t)
        if prev is not None:
            assert prev.row_min <= b.row_min and prev.col_min <= b.col_min
            assert prev.row_max >= b.row_max and prev.col_max >= b.col_max
        prev = b


def test_bounding_box_basics():
    assert BoundingBox(0, 0, 9, 9).area == 100
    assert BoundingBox.full((28, 28)).area == 784
    assert mask_box(np.zeros((4, 4), bool)) is None
    with pytest.raises(ValueError):
        BoundingBox(3, 0, 2, 0)


def test_real_mnist_counts(data_dir):
    train = load_variant(data_dir, "full", "train")
    test = load_variant(data_dir, "full", "test")
    assert (len(train), len(test)) == (60000, 10000)
    assert set(np.unique(train.images)) <= {0.0, 1.0}
    assert len(load_variant(data_dir, "comp38", "train")) == 11982
    assert len(load_variant(data_dir, "comp56", "train")) == 11339
    assert len(load_variant(data_dir, "comp38", "test")) == 1984
    assert len(load_variant(data_dir, "comp56", "test")) == 1850
