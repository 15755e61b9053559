"""Datasets: IDX (MNIST container) files, a synthetic generator, and sample selection."""
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, DataFormatError, InputError
from .seeding import rng_for

IDX_UBYTE = 0x08
IDX_FLOAT64 = 0x0E
_IDX_DTYPES = {IDX_UBYTE: np.dtype(np.uint8), IDX_FLOAT64: np.dtype(">f8")}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "test"
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InputError("pixel values must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        src = dict(self.source, subset_of=self.fingerprint())
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, src)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(str(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


# -- IDX ----------------------------------------------------------------------


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(buf, expect_magic, what):
    if len(buf) < 4:
        raise DataFormatError(f"{what}: file too short for IDX magic", offset=len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic >> 16 != 0 or magic not in expect_magic:
        raise DataFormatError(
            f"{what}: bad IDX magic 0x{magic:08x}, expected "
            + " or ".join(f"0x{m:08x}" for m in expect_magic),
            offset=0,
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{what}: truncated IDX header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = _IDX_DTYPES[(magic >> 8) & 0xFF]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) < header + need:
        raise DataFormatError(
            f"{what}: truncated IDX payload, expected {need} bytes after header, found {len(buf) - header}",
            offset=len(buf),
        )
    if len(buf) > header + need:
        raise DataFormatError(f"{what}: {len(buf) - header - need} trailing bytes", offset=header + need)
    return np.frombuffer(buf, dtype=dtype, count=need // dtype.itemsize, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="test"):
    """Read an IDX image/label pair; pixels are scaled by 1/255 into [0, 1].

    Image files may be 3-D (N, H, W; magic 0x00000803) or 4-D (N, C, H, W;
    magic 0x00000804).  Gzipped files (``.gz``) are read transparently.
    """
    raw = _parse_idx(_open(images_path), (IMAGES_MAGIC, 0x00000804), "images")
    labels = _parse_idx(_open(labels_path), (LABELS_MAGIC,), "labels")
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {raw.shape[0]} images vs {labels.shape[0]} labels", offset=4
        )
    if raw.ndim == 3:
        raw = raw[:, None, :, :]
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(max(labels.max() + 1, 2)) if len(labels) else 2
    source = {"kind": "idx", "images": str(images_path), "labels": str(labels_path)}
    return Dataset(raw.astype(np.float64) / 255.0, labels, num_classes, split, source)


def save_idx(dataset, images_path, labels_path):
    """Write ``dataset`` as IDX; pixels are rounded to the nearest 1/255."""
    q = np.rint(dataset.images * 255.0).astype(np.uint8)
    n, c, h, w = q.shape
    if c == 1:
        head = struct.pack(">IIII", IMAGES_MAGIC, n, h, w)
    else:
        head = struct.pack(">IIIII", 0x00000804, n, c, h, w)
    Path(images_path).write_bytes(head + q.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


def write_idx_float64(path, array):
    """Write an arbitrary float array as IDX type 0x0E (big-endian float64), lossless."""
    a = np.ascontiguousarray(array, dtype=">f8")
    magic = (IDX_FLOAT64 << 8) | a.ndim
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())


def read_idx_float64(path):
    buf = _open(path)
    if len(buf) < 4:
        raise DataFormatError(f"{path}: file too short for IDX magic", offset=len(buf))
    ndim = buf[3]
    return _parse_idx(buf, ((IDX_FLOAT64 << 8) | ndim,), str(path)).astype(np.float64)


# -- synthetic data -----------------------------------------------------------

SYNTH_DEFAULTS = {
    "contrast": 0.18,
    "noise": 0.30,
    "blobs": 4,
    "max_shift": 2,
}


def class_templates(seed, classes, size, channels=1, blobs=4):
    """Smooth per-class patterns with values in [-1, 1].

    Template c is a sum of ``blobs`` signed Gaussian bumps with random
    centres and widths, rescaled to unit max-abs.
    """
    rng = rng_for(seed, "synth/templates")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((classes, channels, size, size))
    for c in range(classes):
        for ch in range(channels):
            t = np.zeros((size, size))
            for _ in range(blobs):
                cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
                sigma = rng.uniform(0.08, 0.2) * size
                sign = rng.choice((-1.0, 1.0))
                t += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            out[c, ch] = t / np.abs(t).max()
    return out


def synth_dataset(seed, n, classes=4, size=28, split="train", channels=1, **knobs):
    """Deterministic template-plus-noise classification data.

    Pixel = clip(0.5 + a * shift(T_y) + u, 0, 1), quantised to multiples of
    1/255, where T_y is the class template, ``a`` is drawn from
    [0.7, 1.0] * contrast, the shift is an integer translation of up to
    ``max_shift`` pixels and ``u`` is uniform noise in [-noise, noise].
    Templates depend only on ``seed``; the samples also depend on ``split``,
    so train and test splits from one seed share their classes.
    """
    if classes < 2:
        raise InputError("synth_dataset needs at least 2 classes")
    if n < 0:
        raise InputError("n must be non-negative")
    p = dict(SYNTH_DEFAULTS)
    unknown = set(knobs) - set(p)
    if unknown:
        raise InputError(f"unknown synth parameters: {sorted(unknown)}")
    p.update(knobs)
    templates = class_templates(seed, classes, size, channels, int(p["blobs"]))
    rng = rng_for(seed, f"synth/{split}")
    labels = rng.permutation(np.arange(n) % classes)
    amp = rng.uniform(0.7, 1.0, size=n) * p["contrast"]
    shifts = rng.integers(-p["max_shift"], p["max_shift"] + 1, size=(n, 2))
    noise = rng.uniform(-p["noise"], p["noise"], size=(n, channels, size, size))
    images = np.empty((n, channels, size, size))
    for i in range(n):
        t = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
        images[i] = 0.5 + amp[i] * t + noise[i]
    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    source = {"kind": "synth", "seed": int(seed), "n": int(n), "classes": int(classes), "size": int(size),
              "channels": int(channels), **{k: p[k] for k in sorted(p)}}
    return Dataset(images, labels, classes, split, source)


def cached_synth(cache_dir, seed, n, classes=4, size=28, split="train", **knobs):
    """:func:`synth_dataset` backed by a content-addressed IDX cache.

    The cache key is a hash of the generator arguments; a hit reloads the
    stored IDX pair, which is exact because generated pixels are already
    multiples of 1/255.
    """
    key_src = json.dumps({"seed": seed, "n": n, "classes": classes, "size": size, "split": split, **knobs},
                         sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:20]
    d = Path(cache_dir) / key
    img, lab = d / "images.idx", d / "labels.idx"
    if img.exists() and lab.exists():
        ds = load_idx(img, lab, num_classes=classes, split=split)
        ds.source = json.loads((d / "source.json").read_text())
        return ds
    ds = synth_dataset(seed, n, classes, size, split, **knobs)
    d.mkdir(parents=True, exist_ok=True)
    save_idx(ds, img, lab)
    (d / "source.json").write_text(json.dumps(ds.source, sort_keys=True))
    return ds


# -- selection ----------------------------------------------------------------


def correct_mask(models, dataset):
    mask = np.ones(len(dataset), dtype=bool)
    for m in models:
        mask &= m.predict(dataset.images) == dataset.labels
    return mask


def select_correctly_classified(models, dataset, n, seed):
    """Seeded uniform sample of ``n`` items that every model gets right."""
    qualified = np.flatnonzero(correct_mask(models, dataset))
    if n > len(qualified):
        raise CapacityError(
            f"requested {n} samples but only {len(qualified)} of {len(dataset)} are correctly "
            f"classified by all {len(models)} models",
            qualified=len(qualified),
        )
    rng = rng_for(seed, "select")
    idx = np.sort(rng.choice(qualified, size=n, replace=False))
    return dataset.subset(idx)
