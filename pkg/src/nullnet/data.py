"""Datasets: IDX digit files, traffic-sign preprocessing, synthetic blobs."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError
from .rng import stream

IDX_UBYTE = 0x08
DATASET_MAGIC = b"NDD1"
DIGIT_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
# 50k train / 10k validation carved from the 60k training file.
DIGIT_TRAIN_SPLIT = 50_000


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_count: int
    input_shape: tuple[int, int, int]
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(
            len(self.y), int(np.prod(self.input_shape)))
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ConsistencyError(f"{self.X.shape[0]} inputs but {self.y.shape[0]} labels")
        if self.X.shape[1] != int(np.prod(self.input_shape)):
            raise ConsistencyError("feature length does not match input_shape")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.X[index], self.y[index], self.class_count, self.input_shape,
                       split or self.split)

    def take(self, n: int, split: str | None = None) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))), split)


def _open(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX container into an ndarray."""
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError("bad IDX magic")
    if raw[2] != IDX_UBYTE:
        raise FormatError(f"unsupported IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) != header + size:
        raise FormatError(f"IDX body has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError("only unsigned-byte IDX is supported")
    head = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def load_idx(images_path, labels_path, class_count: int = 10, split: str = "train") -> Dataset:
    """Images scaled to [0, 1] by /255. Accepts raw or gzipped files."""
    images = parse_idx(_open(images_path))
    labels = parse_idx(_open(labels_path))
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected a 3-d image file and a 1-d label file")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    X = images.reshape(n, h * w).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), class_count, (h, w, 1), split)


def _digit_path(data_dir: Path, key: str) -> Path:
    base = data_dir / DIGIT_FILES[key]
    for cand in (base, base.with_name(base.name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{base}[.gz] not found")


def load_digits(data_dir) -> dict[str, Dataset]:
    """train / validation / test splits of the digit dataset (50k/10k/10k)."""
    data_dir = Path(data_dir)
    full = load_idx(_digit_path(data_dir, "train_images"), _digit_path(data_dir, "train_labels"))
    test = load_idx(_digit_path(data_dir, "test_images"), _digit_path(data_dir, "test_labels"),
                    split="test")
    idx = np.arange(len(full))
    return {
        "train": full.subset(idx[:DIGIT_TRAIN_SPLIT], "train"),
        "validation": full.subset(idx[DIGIT_TRAIN_SPLIT:], "validation"),
        "test": test,
    }


def stratified_sample(ds: Dataset, n: int, rng: np.random.Generator,
                      exclude=None) -> np.ndarray:
    """Indices of ``n`` samples spread as evenly as possible over the classes."""
    available = np.ones(len(ds), dtype=bool)
    if exclude is not None:
        available[np.asarray(exclude, dtype=np.int64)] = False
    per_class = [rng.permutation(np.flatnonzero(available & (ds.y == c)))
                 for c in range(ds.class_count)]
    picked: list[int] = []
    depth = 0
    while len(picked) < n:
        took = False
        for c in range(ds.class_count):
            if depth < len(per_class[c]) and len(picked) < n:
                picked.append(int(per_class[c][depth]))
                took = True
        if not took:
            break
        depth += 1
    return np.array(sorted(picked), dtype=np.int64)


# -- traffic-sign preprocessing ------------------------------------------------

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 1:
        return image[..., 0]
    if image.ndim == 3 and image.shape[2] >= 3:
        return image[..., :3] @ LUMA
    raise ValueError(f"unsupported image shape {image.shape}")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(in_h, out_h)
    c0, c1, fc = axis(in_w, out_w)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def equalize_histogram(image: np.ndarray) -> np.ndarray:
    """256-bin histogram equalization of an integer image in [0, 255].

    ``out(v) = round((cdf(v) - cdf_min) / (N - cdf_min) * 255)``; a constant
    image (cdf_min == N) is returned unchanged.
    """
    img = np.asarray(image)
    if np.any(img < 0) or np.any(img > 255) or np.any(img != np.round(img)):
        raise ValueError("equalization expects integer levels in [0, 255]")
    levels = img.astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    total = levels.size
    cdf_min = cdf[levels.min()]
    if cdf_min == total:
        return levels.copy()
    lut = np.round((cdf - cdf_min) / (total - cdf_min) * 255.0)
    return lut[levels].astype(np.int64)


def preprocess_sign_image(rgb_image, out_size: tuple[int, int] = (28, 28)) -> np.ndarray:
    """Grayscale, bilinear resize, histogram equalization, scale to [0, 1].

    Takes 0-255 pixel values; returns a flat feature vector.
    """
    img = np.asarray(rgb_image, dtype=np.float64)
    if img.ndim < 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("zero-area image")
    gray = resize_bilinear(to_gray(img), *out_size)
    levels = np.clip(np.round(gray), 0, 255)
    return (equalize_histogram(levels) / 255.0).ravel()


# -- synthetic data ------------------------------------------------------------

BLOB_SIGMA = 0.05


def synthetic_blobs(n: int, dims: int, classes: int, separation: float, seed: int,
                    split: str = "train") -> Dataset:
    """Gaussian blobs (sigma = 0.05) whose centres sit ``separation`` sigmas apart.

    Centres lie on a scaled simplex around 0.5 when ``dims >= classes`` and on
    the smallest cubic lattice that holds them otherwise. Samples are clipped
    to [0, 1]^dims.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = stream(seed, "blobs")
    gap = separation * BLOB_SIGMA
    if dims >= classes:
        basis = np.eye(dims)[:classes]
        centres = 0.5 + (gap / np.sqrt(2.0)) * (basis - basis.mean(axis=0))
    else:
        side = 2
        while side ** dims < classes:
            side += 1
        grid = np.indices((side,) * dims).reshape(dims, -1).T[:classes]
        centres = 0.5 + (grid - (side - 1) / 2.0) * gap
    y = rng.integers(0, classes, size=n)
    X = centres[y] + rng.normal(scale=BLOB_SIGMA, size=(n, dims))
    return Dataset(np.clip(X, 0.0, 1.0), y, classes, (1, dims, 1), split)


# -- dataset cache -------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    """``NDD1`` | u32 header length | JSON header | u32 labels | f8 features (LE)."""
    header = json.dumps({"n": len(ds), "input_shape": list(ds.input_shape),
                         "class_count": ds.class_count, "split": ds.split},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(ds.y.astype("<u4").tobytes())
        f.write(ds.X.astype("<f8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad dataset magic")
    (hl,) = struct.unpack("<I", raw[4:8])
    meta = json.loads(raw[8:8 + hl].decode("utf-8"))
    n = meta["n"]
    dim = int(np.prod(meta["input_shape"]))
    off = 8 + hl
    if len(raw) != off + 4 * n + 8 * n * dim:
        raise FormatError(f"{path}: truncated dataset body")
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    X = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off + 4 * n).reshape(n, dim)
    return Dataset(X.astype(np.float64), y, meta["class_count"], tuple(meta["input_shape"]),
                   meta["split"])
