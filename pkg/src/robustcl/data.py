"""Dataset ingestion, synthetic generators, augmentation views, and splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d) vectors or (n, c, h, w) images
    labels: np.ndarray  # (n,) ints in [0, C)
    name: str
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.inputs.shape[0]
        if n < 1 or self.labels.shape != (n,):
            raise DataError("inputs/labels size mismatch")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("dataset contains non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError("label out of range")
        if self.is_image and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise DataError("image data must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx].copy(), self.labels[idx].copy(),
                       name or self.name, self.n_classes)


@dataclass
class ViewBatch:
    x: Tensor
    x_prime: Tensor | None = None
    x_double_prime: Tensor | None = None
    y: np.ndarray | None = None
    x_adv: Tensor | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        for m in (self.x_prime, self.x_double_prime, self.x_adv):
            if m is not None and m.shape[0] != n:
                raise DataError("batch members disagree on leading dimension")
        if self.y is not None and len(self.y) != n:
            raise DataError("label count mismatch in batch")


@dataclass
class AugmentSpec:
    # vectors
    gaussian_noise_sigma: float = 0.1
    feature_dropout_prob: float = 0.1
    # images
    crop_shift_max_pixels: int = 2
    horizontal_flip_prob: float = 0.5
    erase_patch_prob: float = 0.3
    erase_patch_size: int = 4

    def __post_init__(self):
        for p in (self.feature_dropout_prob, self.horizontal_flip_prob, self.erase_patch_prob):
            if not 0.0 <= p <= 1.0:
                raise DataError("augmentation probabilities must lie in [0, 1]")
        if self.gaussian_noise_sigma < 0:
            raise DataError("noise sigma must be >= 0")

    def is_identity(self) -> bool:
        return (self.gaussian_noise_sigma == 0 and self.feature_dropout_prob == 0
                and self.crop_shift_max_pixels == 0 and self.horizontal_flip_prob == 0
                and self.erase_patch_prob == 0)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def load_idx(path_images, path_labels, name: str = "idx") -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled into [0, 1]."""
    with open(path_images, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise DataError(f"truncated IDX image file {path_images}")
    magic, n, h, w = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad IDX image magic {magic:#010x}")
    if len(blob) != 16 + n * h * w:
        raise DataError("truncated IDX image payload")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    with open(path_labels, "rb") as f:
        lblob = f.read()
    if len(lblob) < 8:
        raise DataError(f"truncated IDX label file {path_labels}")
    lmagic, ln = struct.unpack(">II", lblob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"bad IDX label magic {lmagic:#010x}")
    if ln != n:
        raise DataError(f"IDX count mismatch: {n} images vs {ln} labels")
    if len(lblob) != 8 + ln:
        raise DataError("truncated IDX label payload")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images.astype(np.float64) / 255.0, labels, name, int(labels.max()) + 1)


def write_idx(dataset: Dataset, path_images, path_labels) -> None:
    if not dataset.is_image:
        raise DataError("write_idx requires image data")
    n, c, h, w = dataset.inputs.shape
    if c != 1:
        raise DataError("write_idx supports single-channel images")
    pixels = np.clip(np.round(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    with open(path_images, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CSV vectors: header "label,f0,f1,...", one row per sample
# ---------------------------------------------------------------------------

def load_csv(path, name: str = "csv") -> Dataset:
    with open(path) as f:
        header = f.readline().strip().split(",")
        if not header or header[0] != "label":
            raise DataError("CSV header must start with 'label'")
        rows = [line.strip().split(",") for line in f if line.strip()]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return Dataset(feats, labels, name, int(labels.max()) + 1)


def write_csv(dataset: Dataset, path) -> None:
    if dataset.is_image:
        raise DataError("write_csv requires vector data")
    d = dataset.inputs.shape[1]
    with open(path, "w") as f:
        f.write("label," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for y, row in zip(dataset.labels, dataset.inputs):
            f.write(str(int(y)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

def gen_synthetic(kind: str, n: int, dim: int, n_classes: int, seed: int,
                  separation: float = 4.0) -> Dataset:
    """Deterministic synthetic vector datasets.

    two_gaussians: class means at +-(separation/2) * e1, unit variance.
    rings: concentric circles in the first two coordinates.
    blobs_k: n_classes gaussian blobs, labels assigned round-robin.
    """
    if n < n_classes:
        raise DataError("need n >= n_classes")
    if separation <= 0:
        raise DataError("separation must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    if kind == "two_gaussians":
        if n_classes != 2:
            raise DataError("two_gaussians requires n_classes == 2")
        x = rng.standard_normal((n, dim))
        x[:, 0] += np.where(labels == 0, -separation / 2.0, separation / 2.0)
    elif kind == "rings":
        if dim < 2:
            raise DataError("rings requires dim >= 2")
        radii = 1.0 + labels * (separation / 2.0)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        x = rng.standard_normal((n, dim)) * 0.2
        x[:, 0] += radii * np.cos(theta)
        x[:, 1] += radii * np.sin(theta)
    elif kind == "blobs_k":
        centers = rng.uniform(-separation, separation, size=(n_classes, dim))
        x = centers[labels] + rng.standard_normal((n, dim))
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    perm = rng.permutation(n)
    return Dataset(x[perm], labels[perm], f"{kind}_d{dim}_c{n_classes}", n_classes)


def gen_bar_images(n: int, size: int = 16, n_classes: int = 10, seed: int = 0,
                   contrast: float = 0.45, noise_sigma: float = 0.12,
                   shortcut_amp: float = 0.0) -> Dataset:
    """Deterministic synthetic image classes: one horizontal and one vertical
    bar whose positions encode the class, plus jitter and pixel noise.

    Stands in for a small MNIST-style benchmark; amplitude (`contrast`) sets
    how much headroom an l_inf adversary has relative to the class signal.
    `shortcut_amp` additionally stamps a faint class-specific pattern of
    4x4-pixel blocks on every image: a perfectly predictive but non-robust
    feature (coarse enough to survive small crop shifts) that an adversary
    with epsilon >= shortcut_amp can erase or impersonate.
    """
    if n < n_classes or n_classes > 10:
        raise DataError("gen_bar_images supports up to 10 classes, n >= n_classes")
    if shortcut_amp < 0:
        raise DataError("shortcut_amp must be non-negative")
    rng = np.random.default_rng(seed)
    # class patterns come from their own stream so the image noise stream is
    # independent of whether the shortcut feature is enabled
    mask_rng = np.random.default_rng(seed + 1000003)
    block = 4
    grid = -(-size // block)
    coarse = (mask_rng.random((n_classes, grid, grid)) < 0.5).astype(np.float64)
    class_masks = np.kron(coarse, np.ones((block, block)))[:, :size, :size]
    labels = (np.arange(n) % n_classes).astype(np.int64)
    rows = size // 5
    images = np.zeros((n, 1, size, size))
    for i, k in enumerate(labels):
        img = np.zeros((size, size))
        r = 1 + (k % 5) * (size - 3) // 5
        c = 2 + (k // 5) * (size - 6)
        jr = int(rng.integers(-1, 2))
        jc = int(rng.integers(-1, 2))
        r = int(np.clip(r + jr, 0, size - 1))
        c = int(np.clip(c + jc, 0, size - 1))
        img[r, :] += contrast
        img[:, c] += contrast
        img += shortcut_amp * class_masks[k]
        img += rng.standard_normal((size, size)) * noise_sigma
        images[i, 0] = np.clip(img, 0.0, 1.0)
    # quantize like an 8-bit image file would
    images = np.round(images * 255.0) / 255.0
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], f"bars{size}_c{n_classes}", n_classes)


# ---------------------------------------------------------------------------
# augmentation views
# ---------------------------------------------------------------------------

def _augment_once(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
                  is_image: bool) -> np.ndarray:
    out = x.copy()
    n = out.shape[0]
    if is_image:
        _, c, h, w = out.shape
        if spec.crop_shift_max_pixels > 0:
            s = spec.crop_shift_max_pixels
            for i in range(n):
                dy, dx = rng.integers(-s, s + 1, size=2)
                out[i] = np.roll(out[i], (int(dy), int(dx)), axis=(1, 2))
                if dy > 0:
                    out[i, :, :dy, :] = 0
                elif dy < 0:
                    out[i, :, dy:, :] = 0
                if dx > 0:
                    out[i, :, :, :dx] = 0
                elif dx < 0:
                    out[i, :, :, dx:] = 0
        if spec.horizontal_flip_prob > 0:
            flips = rng.random(n) < spec.horizontal_flip_prob
            out[flips] = out[flips][:, :, :, ::-1]
        if spec.erase_patch_prob > 0:
            p = spec.erase_patch_size
            for i in range(n):
                if rng.random() < spec.erase_patch_prob:
                    r = int(rng.integers(0, max(1, h - p)))
                    cc = int(rng.integers(0, max(1, w - p)))
                    out[i, :, r:r + p, cc:cc + p] = 0.0
        if spec.gaussian_noise_sigma > 0:
            out += rng.standard_normal(out.shape) * spec.gaussian_noise_sigma
        np.clip(out, 0.0, 1.0, out=out)
    else:
        if spec.gaussian_noise_sigma > 0:
            out += rng.standard_normal(out.shape) * spec.gaussian_noise_sigma
        if spec.feature_dropout_prob > 0:
            keep = rng.random(out.shape) >= spec.feature_dropout_prob
            out *= keep
    return out


def make_views(x: np.ndarray, spec: AugmentSpec, seed: int):
    """Two independent augmentation draws of the same minibatch."""
    x = np.asarray(x, dtype=np.float64)
    is_image = x.ndim == 4
    if not is_image and x.ndim != 2:
        raise DataError("make_views expects (n, d) vectors or (n, c, h, w) images")
    if spec.is_identity():
        return x.copy(), x.copy()
    rng = np.random.default_rng(seed)
    xp = _augment_once(x, spec, rng, is_image)
    xpp = _augment_once(x, spec, rng, is_image)
    return xp, xpp


# ---------------------------------------------------------------------------
# splits and batching
# ---------------------------------------------------------------------------

def split(dataset: Dataset, fractions, seed: int):
    """Label-stratified split into len(fractions) disjoint datasets."""
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for c in range(dataset.n_classes):
        idx = np.where(dataset.labels == c)[0]
        if len(idx) < len(fractions):
            raise DataError(f"class {c} has fewer samples than splits")
        idx = rng.permutation(idx)
        bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        start = 0
        for j, b in enumerate(bounds):
            parts[j].append(idx[start:b])
            start = b
    out = []
    names = [f"{dataset.name}_split{j}" for j in range(len(fractions))]
    for j, chunks in enumerate(parts):
        idx = np.sort(np.concatenate(chunks))
        out.append(dataset.subset(idx, names[j]))
    return tuple(out)


def iter_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Shuffled minibatches; order is a pure function of (seed, epoch)."""
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(dataset.n)
    for start in range(0, dataset.n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue  # contrastive losses degenerate on singleton tails
        yield dataset.inputs[idx], dataset.labels[idx]
