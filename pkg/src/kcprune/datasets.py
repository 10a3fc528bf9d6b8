"""IDX file loading and a seeded synthetic image-classification generator."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IDXError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise UsageError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise UsageError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, n):
        n = min(int(n), len(self))
        return Dataset(self.images[:n], self.labels[:n], self.class_count, dict(self.meta, limit=n))

    def order(self, epoch, seed):
        """Seeded permutation for one epoch; reproducible per (seed, epoch)."""
        return np.random.default_rng([int(seed), int(epoch)]).permutation(len(self))

    def batches(self, batch_size, epoch=0, seed=0, shuffle=True):
        idx = self.order(epoch, seed) if shuffle else np.arange(len(self))
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield self.images[sel], self.labels[sel]


def _parse_idx(path, expected_magic, what):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IDXError(f"{path}: cannot read ({exc.strerror or exc})") from None
    if len(raw) < 4:
        raise IDXError(f"{path}: corrupt IDX (file shorter than magic)")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IDXError(f"{path}: not IDX {what} file (magic 0x{magic:08x}, expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXError(f"{path}: corrupt IDX (truncated header)")
    dims = [int.from_bytes(raw[4 + 4 * k:8 + 4 * k], "big") for k in range(ndim)]
    if any(d == 0 for d in dims[1:]):
        raise IDXError(f"{path}: corrupt IDX (zero dimension in {dims})")
    need = math.prod(dims)
    if len(raw) - head != need:
        raise IDXError(f"{path}: corrupt IDX (payload {len(raw) - head} bytes, header declares {need})")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, limit=None, class_count=None):
    """Read an (images, labels) IDX pair; pixels are scaled by 1/255, C = 1."""
    imgs = _parse_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labs = _parse_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if imgs.shape[0] != labs.shape[0]:
        raise IDXError(f"label/image count mismatch: {imgs.shape[0]} images, {labs.shape[0]} labels")
    if limit is not None:
        if limit < 0:
            raise UsageError("limit must be non-negative")
        imgs, labs = imgs[:limit], labs[:limit]
    labels = labs.astype(np.int64)
    if class_count is None:
        class_count = max(int(labels.max()) + 1 if len(labels) else 1, 2)
    elif len(labels) and labels.max() >= class_count:
        raise IDXError(f"label {int(labels.max())} out of range for {class_count} classes")
    images = (imgs.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    meta = {"source": "idx", "images": str(images_path), "labels": str(labels_path)}
    return Dataset(np.ascontiguousarray(images), labels, int(class_count), meta)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (the inverse of the parser)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = (0x0800 | a.ndim).to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in a.shape)
    Path(path).write_bytes(header + a.tobytes())


def class_templates(class_count, image_size):
    """One oriented bar per class through the image centre, values in {0, 1}."""
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) - (s - 1) / 2.0
    out = np.zeros((class_count, s, s))
    for c in range(class_count):
        theta = math.pi * c / class_count
        # distance of each pixel to the line through the centre at angle theta
        dist = np.abs(-math.sin(theta) * xx + math.cos(theta) * yy)
        out[c] = (dist <= max(0.75, s / 16)).astype(np.float64)
    return out


def synth_dataset(seed, n, class_count=4, image_size=16, separation=4.0):
    """Bars-with-noise classification data.

    Each image is ``0.25 + 0.5 * template`` plus Gaussian noise of standard
    deviation ``1 / separation``, clipped to [0, 1].  ``separation=inf`` gives
    noiseless data.  Labels are balanced.
    """
    if class_count < 2:
        raise UsageError("class_count must be at least 2")
    if n < 1 or image_size < 2:
        raise UsageError("n must be >= 1 and image_size >= 2")
    if not separation > 0:
        raise UsageError("separation must be positive")
    rng = np.random.default_rng(int(seed))
    labels = rng.permutation(np.arange(n) % class_count).astype(np.int64)
    tmpl = class_templates(class_count, image_size)
    images = 0.25 + 0.5 * tmpl[labels]
    sigma = 0.0 if math.isinf(separation) else 1.0 / separation
    if sigma:
        images = images + sigma * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)[:, None, :, :]
    meta = {"source": "synth", "seed": int(seed), "n": int(n), "class_count": int(class_count),
            "image_size": int(image_size), "separation": float(separation)}
    return Dataset(np.ascontiguousarray(images), labels, class_count, meta)
