"""Dataset ingestion: MNIST IDX files, synthetic strokes and blobs, and splits."""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng
from .errors import ConsistencyError, FormatError, ParseError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    image_shape: tuple
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ConsistencyError(f"x{self.x.shape} and y{self.y.shape} disagree")
        if int(np.prod(self.image_shape)) != self.x.shape[1]:
            raise ConsistencyError(f"image shape {self.image_shape} does not cover dimension {self.x.shape[1]}")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx, name=None):
        return Dataset(self.x[idx], self.y[idx], self.image_shape, self.n_classes, name or self.name)


@dataclass
class DatasetManifest:
    source: str
    counts: dict
    dim: int
    n_classes: int
    image_shape: tuple
    normalization: str = "pixel/255"
    seed: int = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "source": self.source,
            "counts": dict(self.counts),
            "dim": self.dim,
            "n_classes": self.n_classes,
            "image_shape": list(self.image_shape),
            "normalization": self.normalization,
            "seed": self.seed,
            **self.extra,
        }


# ------------------------------------------------------------------------
# IDX


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"{path}: corrupt gzip stream") from exc
    return raw


def parse_idx_images(raw):
    """Parse an IDX3 image stream into an ``(count, rows, cols)`` uint8 array."""
    if len(raw) < 4:
        raise ParseError(f"image stream truncated at offset {len(raw)} (need 4-byte magic)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})")
    if len(raw) < 16:
        raise ParseError(f"image header truncated at offset {len(raw)} (need 16 bytes)")
    count, rows, cols = struct.unpack_from(">III", raw, 4)
    if rows == 0 or cols == 0:
        raise FormatError(f"degenerate image geometry {rows}x{cols} at offset 8")
    need = 16 + count * rows * cols
    if len(raw) != need:
        raise ParseError(f"image payload has {len(raw) - 16} bytes, header promises {need - 16}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def parse_idx_labels(raw):
    if len(raw) < 4:
        raise ParseError(f"label stream truncated at offset {len(raw)} (need 4-byte magic)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})")
    if len(raw) < 8:
        raise ParseError(f"label header truncated at offset {len(raw)} (need 8 bytes)")
    (count,) = struct.unpack_from(">I", raw, 4)
    if len(raw) != 8 + count:
        raise ParseError(f"label payload has {len(raw) - 8} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_idx(images_path, labels_path, n_classes=10):
    """Load an IDX image/label pair (optionally gzip-compressed); pixels scaled to [0, 1]."""
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and int(labels.max()) >= n_classes:
        raise ConsistencyError(f"label {int(labels.max())} outside {n_classes} classes")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), images.shape[1:], n_classes, name="mnist")


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(count, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ------------------------------------------------------------------------
# synthetic


def synth_dataset(seed, per_class, n=784, n_classes=10, spread=0.15, radius=6.0, image_shape=None):
    """Gaussian class blobs in [0, 1]^n.

    Class means are the vertices of a regular simplex of edge ``radius * sqrt(2)``
    centred on the grey image 0.5; members add isotropic noise of std
    ``spread`` and are clipped to [0, 1].  Rows are ordered class by class.
    """
    if n_classes < 2:
        raise UsageError("need at least two classes")
    if image_shape is None:
        side = int(round(np.sqrt(n)))
        image_shape = (side, side) if side * side == n else (1, n)
    gen = rng.stream(seed, "synthetic", "means")
    basis, _ = np.linalg.qr(gen.normal(size=(n, n_classes)))
    dirs = basis.T - basis.T.mean(axis=0)
    means = np.clip(0.5 + radius * dirs, 0.0, 1.0)
    noise = rng.stream(seed, "synthetic", "noise").normal(size=(n_classes, per_class, n))
    x = np.clip(means[:, None, :] + spread * noise, 0.0, 1.0).reshape(-1, n)
    y = np.repeat(np.arange(n_classes), per_class)
    return Dataset(x, y, tuple(image_shape), n_classes, name="synthetic")


def synth_strokes(seed, per_class, n_classes=10, side=28, n_strokes=4, jitter=1.5, points=60):
    """Digit-like images: blurred line strokes on a black background.

    Each class has ``n_strokes`` prototype segments; every sample redraws
    them with endpoints jittered by ``jitter`` pixels (std), a random blur
    width and a random ink gain, so most pixels are exactly 0 and stroke
    centres saturate at 1 as in scanned handwriting.  Rows are ordered class
    by class.
    """
    if n_classes < 2:
        raise UsageError("need at least two classes")
    lo, hi = side * 0.18, side * 0.82
    protos = rng.stream(seed, "strokes", "prototypes").uniform(lo, hi, size=(n_classes, n_strokes, 2, 2))
    gen = rng.stream(seed, "strokes", "samples")
    t = np.linspace(0.0, 1.0, points)[:, None]
    x = np.zeros((n_classes * per_class, side * side))
    row = 0
    for c in range(n_classes):
        for _ in range(per_class):
            ends = protos[c] + gen.normal(0.0, jitter, size=protos[c].shape)
            pts = ends[:, None, 0, :] * (1.0 - t) + ends[:, None, 1, :] * t
            rc = np.clip(np.round(pts.reshape(-1, 2)), 0, side - 1).astype(np.int64)
            img = np.zeros((side, side))
            img[rc[:, 0], rc[:, 1]] = 1.0
            img = ndimage.gaussian_filter(img, gen.uniform(0.7, 1.2))
            img = np.clip(img / img.max() * gen.uniform(1.5, 2.0), 0.0, 1.0)
            img[img < 0.05] = 0.0
            x[row] = img.ravel()
            row += 1
    y = np.repeat(np.arange(n_classes), per_class)
    return Dataset(x, y, (side, side), n_classes, name="strokes")


def split(dataset, fractions, seed):
    """Deterministic disjoint train/val/test cover of ``dataset``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0, atol=1e-9):
        raise UsageError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = rng.stream(seed, "split").permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    names = ("train", "val", "test")
    return tuple(dataset.subset(np.sort(p), name=f"{dataset.name}-{nm}") for p, nm in zip(parts, names))
