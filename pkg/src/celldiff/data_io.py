"""Dataset ingestion, image sheets and checkpoint files.

Checkpoint layout (``CNDF``, all integers little-endian)::

    b"CNDF"  u32 version  u32 epoch
    u32 len  config JSON (UTF-8, sorted keys)
    u32 len  rng state bytes
    u32 count, then per array:
        u16 len  name (UTF-8)
        u8 dtype code  u8 ndim  ndim x u32 dims  raw little-endian data
    u32 CRC-32 of everything above
"""

from __future__ import annotations

import gzip
import io
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"CNDF"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
# published uncompressed sizes, used by the optional fetch helper
MNIST_SIZES = {
    "train-images-idx3-ubyte": 47040016,
    "train-labels-idx1-ubyte": 60008,
    "t10k-images-idx3-ubyte": 7840016,
    "t10k-labels-idx1-ubyte": 10008,
}


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` scaled to [-1, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ValueError("dataset pixels must lie in [-1, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name,
                       split or self.split, dict(self.meta))

    def split_holdout(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded random split into ``(train, holdout)``."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        n_hold = int(round(len(self) * fraction))
        return self.subset(np.sort(perm[n_hold:]), "train"), self.subset(np.sort(perm[:n_hold]), "holdout")


# -- IDX -------------------------------------------------------------------


def _open_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(buf: bytes, scale: bool = True) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError("IDX data truncated: missing magic number")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ValueError(
            f"bad IDX magic 0x{magic:08x}; expected 0x{IDX_IMAGES_MAGIC:08x} (images) "
            f"or 0x{IDX_LABELS_MAGIC:08x} (labels)"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ValueError(f"IDX data truncated: header needs {header} bytes, got {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header != count:
        raise ValueError(
            f"IDX payload size mismatch: dims {dims} need {count} bytes, found {len(buf) - header}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    if not scale:
        return raw.copy()
    return raw.astype(np.float64) / 127.5 - 1.0


def read_idx(path, scale: bool = True) -> np.ndarray:
    """Read an MNIST IDX file (optionally gzipped).

    Image files come back as float64 in [-1, 1] (or raw uint8 with
    ``scale=False``); label files as int64.
    """
    return parse_idx(_open_bytes(path), scale=scale)


def write_idx(path, array) -> None:
    """Write a uint8 array in IDX layout; 1-D arrays become label files."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 payloads")
    magic = IDX_LABELS_MAGIC if arr.ndim == 1 else (0x00000800 | arr.ndim)
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def find_mnist_file(root, stem: str) -> Path:
    root = Path(root)
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"MNIST file {stem}[.gz] not found under {root}")


def load_mnist(root=None, split: str = "train") -> Dataset:
    """Load an MNIST split from IDX files under ``root`` (default ``$CELLDIFF_DATA_DIR``)."""
    root = root or os.environ.get("CELLDIFF_DATA_DIR")
    if not root:
        raise FileNotFoundError("no MNIST directory given and CELLDIFF_DATA_DIR is unset")
    img_stem, lbl_stem = MNIST_FILES[split]
    images = read_idx(find_mnist_file(root, img_stem))
    labels = read_idx(find_mnist_file(root, lbl_stem))
    return Dataset(images, labels, 10, "mnist", split)


def mnist_available(root=None) -> bool:
    root = root or os.environ.get("CELLDIFF_DATA_DIR")
    if not root:
        return False
    try:
        for img, lbl in MNIST_FILES.values():
            find_mnist_file(root, img)
            find_mnist_file(root, lbl)
    except FileNotFoundError:
        return False
    return True


def fetch_mnist(root, base_url: str) -> list[Path]:
    """Download the four MNIST IDX files from ``base_url`` and check their published sizes."""
    import urllib.request

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, size in MNIST_SIZES.items():
        dest = root / stem
        if not dest.exists():
            with urllib.request.urlopen(f"{base_url.rstrip('/')}/{stem}.gz") as resp:
                data = gzip.decompress(resp.read())
            dest.write_bytes(data)
        if dest.stat().st_size != size:
            raise ValueError(f"{dest} has {dest.stat().st_size} bytes, expected {size}")
        written.append(dest)
    return written


# -- synthetic and bundled datasets -----------------------------------------


def make_toy_dataset(kind: str = "bars", n: int = 1000, size: int = 8, seed: int = 0,
                     noise: float = 0.05) -> Dataset:
    """Two-class synthetic images.

    ``bars``: class 0 is a horizontal bar, class 1 a vertical bar, two pixels
    thick at a jittered position near the centre. ``blobs``: a Gaussian blob
    in the upper-left (class 0) or lower-right (class 1) quadrant. Labels
    alternate before shuffling, so classes balance exactly for even ``n``.
    """
    if size < 4:
        raise ValueError(f"toy images need size >= 4, got {size}")
    if kind not in ("bars", "blobs"):
        raise ValueError(f"unknown toy dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    images = np.full((n, 1, size, size), -1.0)
    rr, cc = np.mgrid[0:size, 0:size]
    for k, lab in enumerate(labels):
        if kind == "bars":
            pos = size // 2 - 1 + rng.integers(-1, 2)
            if lab == 0:
                images[k, 0, pos:pos + 2, :] = 1.0
            else:
                images[k, 0, :, pos:pos + 2] = 1.0
        else:
            centre = size * (0.3 if lab == 0 else 0.7) + rng.normal(0, 0.05 * size, 2)
            width = 0.15 * size
            blob = np.exp(-((rr - centre[0]) ** 2 + (cc - centre[1]) ** 2) / (2 * width**2))
            images[k, 0] = 2 * blob - 1
    if noise > 0:
        images += rng.normal(0, noise, images.shape)
    np.clip(images, -1.0, 1.0, out=images)
    return Dataset(images, labels, 2, f"toy-{kind}", "train", {"seed": seed, "size": size})


def load_digits_dataset() -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits (1797 images, 10 classes)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    images = d.images / 8.0 - 1.0
    return Dataset(images[:, None], d.target, 10, "digits", "train")


def load_dataset(name: str, n: int = 1000, seed: int = 0, size: int = 8) -> Dataset:
    """Resolve a dataset name: ``toy``/``toy-bars``, ``toy-blobs``, ``digits``, ``mnist`` or an MNIST directory."""
    if name in ("toy", "toy-bars", "bars"):
        return make_toy_dataset("bars", n, size, seed)
    if name in ("toy-blobs", "blobs"):
        return make_toy_dataset("blobs", n, size, seed)
    if name == "digits":
        return load_digits_dataset()
    if name == "mnist":
        return load_mnist(None, "train")
    if Path(name).is_dir():
        return load_mnist(name, "train")
    raise ValueError(f"unknown dataset {name!r}: use toy, toy-blobs, digits, mnist or an MNIST directory")


# -- image sheets -----------------------------------------------------------


def quantize(images) -> np.ndarray:
    """Map [-1, 1] to bytes 0..255 with rounding; out-of-range values are clipped."""
    x = np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def tile_images(images, ncols: int | None = None) -> np.ndarray:
    """Tile ``(N, [C,] H, W)`` images row-major into one ``(rows*H, cols*W)`` raster (first channel)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 4:
        x = x[:, 0]
    if x.ndim == 2:
        x = x[None]
    n, h, w = x.shape
    if n == 0:
        raise ValueError("cannot tile an empty image set")
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = -(-n // ncols)
    sheet = np.full((nrows * h, ncols * w), -1.0)
    for k in range(n):
        r, c = divmod(k, ncols)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = x[k]
    return sheet


def write_image_grid(images, path, format: str | None = None, ncols: int | None = None) -> Path:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "pgm").lower()
    raster = quantize(tile_images(images, ncols))
    if fmt == "pgm":
        h, w = raster.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(raster.tobytes())
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(raster, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    pos += 1
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise ValueError("PGM payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    arrays: "OrderedDict[str, np.ndarray]"
    rng_state: bytes = b""
    epoch: int = 0
    version: int = CHECKPOINT_VERSION


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype if arr.dtype.itemsize == 1 else arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"array {name!r}: unsupported dtype {arr.dtype}")
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, ckpt.epoch))
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(ckpt.rng_state)) + bytes(ckpt.rng_state))
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        buf.write(_encode_array(name, arr))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a CNDF checkpoint (magic {data[:4]!r})")
    if len(data) < 16:
        raise ValueError("checkpoint truncated")
    version, epoch = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} is not supported (this build reads version {CHECKPOINT_VERSION})")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ValueError("checkpoint corrupted: CRC mismatch")
    try:
        pos = 12
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos:pos + n].decode("utf-8"))
        pos += n
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        rng_state = bytes(body[pos:pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize
            if pos + nbytes > len(body):
                raise ValueError(f"array {name!r} truncated")
            arrays[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"checkpoint corrupted: {exc}") from exc
    if pos != len(body):
        raise ValueError("checkpoint corrupted: trailing bytes")
    return Checkpoint(config, arrays, rng_state, epoch, version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
