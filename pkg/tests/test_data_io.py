import gzip
import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from celldiff.data_io import (
    Checkpoint,
    Dataset,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_dataset,
    load_mnist,
    make_toy_dataset,
    mnist_available,
    parse_idx,
    quantize,
    read_idx,
    read_pgm,
    save_checkpoint,
    tile_images,
    write_idx,
    write_image_grid,
)

# two 2x2 images, bytes laid out by hand: magic, n, rows, cols, then pixels row-major
IMAGES_FIXTURE = bytes([
    0x00, 0x00, 0x08, 0x03,
    0x00, 0x00, 0x00, 0x02,
    0x00, 0x00, 0x00, 0x02,
    0x00, 0x00, 0x00, 0x02,
    0x00, 0xFF, 0x80, 0x33,
    0x01, 0x02, 0xFE, 0x7F,
])
LABELS_FIXTURE = bytes([0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 0x09, 0x00])


def test_idx_fixture_exact_values():
    got = parse_idx(IMAGES_FIXTURE)
    expect = np.array([[[0, 255], [128, 51]], [[1, 2], [254, 127]]], dtype=np.float64) / 127.5 - 1.0
    assert got.shape == (2, 2, 2)
    assert np.array_equal(got, expect)
    assert got[0, 0, 0] == -1.0 and got[0, 0, 1] == 1.0
    assert parse_idx(LABELS_FIXTURE).tolist() == [9, 0]


def test_idx_read_from_file_and_gzip(tmp_path):
    (tmp_path / "a-idx3-ubyte").write_bytes(IMAGES_FIXTURE)
    with gzip.open(tmp_path / "a-idx3-ubyte.gz", "wb") as fh:
        fh.write(IMAGES_FIXTURE)
    assert np.array_equal(read_idx(tmp_path / "a-idx3-ubyte"), read_idx(tmp_path / "a-idx3-ubyte.gz"))


@pytest.mark.parametrize("cut", [0, 3, 10, 16, len(IMAGES_FIXTURE) - 1])
def test_idx_truncated(cut):
    with pytest.raises(ValueError, match="truncated|mismatch"):
        parse_idx(IMAGES_FIXTURE[:cut])


def test_idx_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        parse_idx(b"\x00\x00\x09\x03" + IMAGES_FIXTURE[4:])


@settings(max_examples=30, deadline=None)
@given(arr=arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5))))
def test_idx_writer_round_trip_is_identity(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("idx") / "x"
    write_idx(path, arr)
    assert np.array_equal(read_idx(path, scale=False), arr)


def test_mnist_directory_loading(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    for split, n in (("train", 6), ("t10k", 3)):
        write_idx(tmp_path / f"{split}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        write_idx(tmp_path / f"{split}-labels-idx1-ubyte", rng.integers(0, 10, n, dtype=np.uint8))
    monkeypatch.setenv("CELLDIFF_DATA_DIR", str(tmp_path))
    assert mnist_available()
    ds = load_mnist(split="test")
    assert len(ds) == 3 and ds.image_shape == (1, 28, 28) and ds.num_classes == 10
    assert len(load_dataset("mnist")) == 6
    monkeypatch.delenv("CELLDIFF_DATA_DIR")
    assert not mnist_available()
    with pytest.raises(FileNotFoundError):
        load_mnist()


def test_toy_dataset_determinism_and_balance():
    a, b = make_toy_dataset("bars", 100, seed=3), make_toy_dataset("bars", 100, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [50, 50]
    blobs = make_toy_dataset("blobs", 10, size=12, seed=1)
    assert blobs.images.shape == (10, 1, 12, 12)
    for ds in (a, blobs):
        assert ds.images.min() >= -1 and ds.images.max() <= 1
    with pytest.raises(ValueError):
        make_toy_dataset(size=3)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1, 4, 4)), np.zeros(2, dtype=int), 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 4, 4), 2.0), np.zeros(1, dtype=int), 2)
    ds = make_toy_dataset(n=50)
    train, hold = ds.split_holdout(0.2, seed=0)
    assert len(train) == 40 and len(hold) == 10
    assert sorted(np.concatenate([train.labels, hold.labels])) == sorted(ds.labels)


def test_pgm_examples(tmp_path):
    path = write_image_grid(-np.ones((1, 2, 2)), tmp_path / "a.pgm")
    assert path.read_bytes() == b"P5\n2 2\n255\n" + b"\x00" * 4
    assert quantize([1.0, -1.0, 0.0, 5.0]).tolist() == [255, 0, 128, 255]


def test_pgm_round_trip_and_tiling(tmp_path):
    imgs = np.random.default_rng(0).uniform(-1, 1, (5, 1, 3, 4))
    path = write_image_grid(imgs, tmp_path / "g.pgm", ncols=2)
    raster = read_pgm(path)
    assert raster.shape == (3 * 3, 2 * 4)
    assert np.array_equal(raster, quantize(tile_images(imgs, 2)))
    assert np.array_equal(raster[3:6, 4:8], quantize(imgs[3, 0]))
    assert np.all(raster[6:9, 4:8] == 0)


def test_png_output(tmp_path):
    from PIL import Image

    imgs = np.random.default_rng(1).uniform(-1, 1, (4, 1, 5, 5))
    path = write_image_grid(imgs, tmp_path / "g.png")
    assert np.array_equal(np.asarray(Image.open(path)), quantize(tile_images(imgs)))
    with pytest.raises(ValueError):
        write_image_grid(imgs, tmp_path / "g.bmp")
    with pytest.raises(ValueError):
        write_image_grid(imgs[:0], tmp_path / "e.pgm")


def sample_checkpoint():
    rng = np.random.default_rng(0)
    arrays_ = OrderedDict([
        ("param/w", rng.normal(size=(3, 2, 3, 3))),
        ("param/b", rng.normal(size=3).astype(np.float32)),
        ("count", np.arange(5, dtype=np.int64)),
        ("scalar", np.array(2.5)),
    ])
    return Checkpoint({"b": 1, "a": {"x": [1, 2]}}, arrays_, b"\x01\x02\x03", epoch=7)


def test_checkpoint_layout():
    ck = sample_checkpoint()
    data = encode_checkpoint(ck)
    assert data[:4] == b"CNDF"
    assert struct.unpack_from("<II", data, 4) == (1, 7)
    (n,) = struct.unpack_from("<I", data, 12)
    assert data[16:16 + n] == b'{"a":{"x":[1,2]},"b":1}'
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = sample_checkpoint()
    p1 = save_checkpoint(tmp_path / "a.cndf", ck)
    back = load_checkpoint(p1)
    assert back.config == ck.config and back.epoch == 7 and back.rng_state == ck.rng_state
    assert list(back.arrays) == list(ck.arrays)
    for k in ck.arrays:
        assert back.arrays[k].dtype == ck.arrays[k].dtype
        assert back.arrays[k].tobytes() == ck.arrays[k].tobytes()
    p2 = save_checkpoint(tmp_path / "b.cndf", back)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_errors():
    data = encode_checkpoint(sample_checkpoint())
    with pytest.raises(ValueError, match="magic"):
        decode_checkpoint(b"XXXX" + data[4:])
    bumped = bytearray(data)
    bumped[4:8] = struct.pack("<I", 2)
    with pytest.raises(ValueError, match="version 2.*version 1"):
        decode_checkpoint(bytes(bumped))
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(ValueError, match="CRC"):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(ValueError):
        decode_checkpoint(data[:10])
