"""Datasets: IDX files, transfer splits, synthetic generators, augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Immutable image-classification dataset.

    ``channel_means`` records the per-channel means subtracted during
    normalization (always computed on a training split, never on val/test).
    """
    images: np.ndarray          # (N, C, H, W) float64
    labels: np.ndarray          # (N,) int64 in [0, num_classes)
    num_classes: int
    channel_means: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (N, C, H, W) aligned with labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def subset(ds: Dataset, indices) -> Dataset:
    indices = np.asarray(indices)
    return replace(ds, images=ds.images[indices], labels=ds.labels[indices])


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.num_classes != b.num_classes or a.images.shape[1:] != b.images.shape[1:]:
        raise ValueError("datasets are not compatible")
    return Dataset(np.concatenate([a.images, b.images]), np.concatenate([a.labels, b.labels]),
                   a.num_classes, a.channel_means, id=f"{a.id}+{b.id}")


def channel_means_of(ds: Dataset) -> np.ndarray:
    return ds.images.mean(axis=(0, 2, 3))


def normalize_with(ds: Dataset, means: np.ndarray) -> Dataset:
    """Subtract fixed per-channel means (taken from a training split)."""
    means = np.asarray(means, dtype=np.float64)
    return replace(ds, images=ds.images - means[None, :, None, None], channel_means=means)


@dataclass
class TransferTaskPair:
    """Source task plus disjoint target train/val/test splits."""
    source: Dataset
    target_train: Dataset
    target_val: Dataset
    target_test: Dataset
    per_class_train: int


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------

def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (big-endian headers, u8 payload)."""
    img_raw = Path(images_path).read_bytes()
    if len(img_raw) < 16:
        raise IdxFormatError(f"truncated image file {images_path}")
    magic, n, h, w = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"bad magic 0x{magic:08x} in image file {images_path}")
    if len(img_raw) != 16 + n * h * w:
        raise IdxFormatError(f"truncated image file {images_path}")
    lbl_raw = Path(labels_path).read_bytes()
    if len(lbl_raw) < 8:
        raise IdxFormatError(f"truncated label file {labels_path}")
    lmagic, ln = struct.unpack(">II", lbl_raw[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"bad magic 0x{lmagic:08x} in label file {labels_path}")
    if len(lbl_raw) != 8 + ln:
        raise IdxFormatError(f"truncated label file {labels_path}")
    if ln != n:
        raise IdxFormatError(f"count mismatch: {n} images vs {ln} labels")
    images = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    k = int(labels.max()) + 1 if n else 0
    return Dataset(images / 255.0, labels, k,
                   id=f"idx({Path(images_path).name},{Path(labels_path).name})")


def write_idx(ds: Dataset, images_path, labels_path):
    """Write a grayscale dataset as an IDX image/label pair (u8 quantized)."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pix = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pix.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# transfer splits
# --------------------------------------------------------------------------

def _split_counts(indices_by_class, per_class_train, val_fraction, rng):
    train, val, test = [], [], []
    for idx in indices_by_class:
        idx = rng.permutation(idx)
        if idx.size < per_class_train + 1:
            raise ValueError(
                f"insufficient examples: need more than {per_class_train} per class, have {idx.size}")
        train.append(idx[:per_class_train])
        rest = idx[per_class_train:]
        n_val = int(val_fraction * rest.size)
        val.append(rest[:n_val])
        test.append(rest[n_val:])
    return (np.concatenate(train), np.concatenate(val) if val else np.array([], dtype=int),
            np.concatenate(test))


def make_split_transfer(dataset: Dataset, source_classes, target_classes,
                        per_class_train: int, val_fraction: float, seed: int) -> TransferTaskPair:
    """Carve a source task and target train/val/test splits out of one dataset.

    Source and target class lists must be disjoint; both tasks are relabeled
    to 0..K-1 in list order.  Target splits are normalized with the target
    training split's channel means; the source dataset is returned raw (its
    own training means are applied during pretraining).
    """
    source_classes = list(source_classes)
    target_classes = list(target_classes)
    if set(source_classes) & set(target_classes):
        raise ValueError("source and target class lists overlap")
    rng = np.random.default_rng(seed)

    src_idx = np.concatenate([np.flatnonzero(dataset.labels == c) for c in source_classes])
    src_map = {c: i for i, c in enumerate(source_classes)}
    source = Dataset(dataset.images[src_idx],
                     np.array([src_map[c] for c in dataset.labels[src_idx]]),
                     len(source_classes), id=f"{dataset.id}|source{source_classes}")

    tgt_map = {c: i for i, c in enumerate(target_classes)}
    by_class = [np.flatnonzero(dataset.labels == c) for c in target_classes]
    tr, va, te = _split_counts(by_class, per_class_train, val_fraction, rng)

    def build(idx, name):
        return Dataset(dataset.images[idx],
                       np.array([tgt_map[c] for c in dataset.labels[idx]], dtype=np.int64),
                       len(target_classes), id=f"{dataset.id}|target-{name}{target_classes}")

    t_train = build(rng.permutation(tr), "train")
    t_val = build(va, "val")
    t_test = build(te, "test")
    means = channel_means_of(t_train)
    return TransferTaskPair(source, normalize_with(t_train, means),
                            normalize_with(t_val, means), normalize_with(t_test, means),
                            per_class_train)


# --------------------------------------------------------------------------
# synthetic blob tasks
# --------------------------------------------------------------------------

def _blob_image(rng, dims):
    """Smooth random prototype: a few signed Gaussian bumps."""
    c, h, w = dims
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros(dims)
    for _ in range(3):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(max(h, w) / 8.0, max(h, w) / 4.0)
        amp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        img += bump[None, :, :]
    return img


def synthetic_prototypes(seed: int, dims, source_k: int, target_k: int, shift: float):
    """Class prototypes of the generator; target ones are shifted source ones."""
    rng = np.random.default_rng(seed)
    source = [_blob_image(rng, dims) for _ in range(source_k)]
    target = []
    for k in range(target_k):
        if k < source_k:
            direction = rng.normal(size=dims)
            direction /= np.sqrt((direction ** 2).sum())
            target.append(source[k] + shift * direction)
        else:
            target.append(_blob_image(rng, dims))
    return np.stack(source), np.stack(target)


def generate_synthetic_pair(seed: int, dims, source_k: int, target_k: int, shift: float,
                            n_per_class: int = 200, noise: float = 0.25,
                            per_class_train: int = 30, val_fraction: float = 0.2) -> TransferTaskPair:
    """Class-conditional Gaussian blob tasks; ``shift`` perturbs the target
    prototypes away from the source ones, controlling task similarity."""
    if shift < 0:
        raise ValueError("shift must be nonnegative")
    src_proto, tgt_proto = synthetic_prototypes(seed, dims, source_k, target_k, shift)
    rng = np.random.default_rng(seed + 1)
    tag = f"synthetic(seed={seed},dims={tuple(dims)},shift={shift},noise={noise})"

    def sample(protos, n, k):
        images = np.repeat(protos, n, axis=0) + noise * rng.standard_normal((n * k,) + tuple(dims))
        labels = np.repeat(np.arange(k), n)
        perm = rng.permutation(n * k)
        return images[perm], labels[perm]

    s_img, s_lbl = sample(src_proto, n_per_class, source_k)
    source = Dataset(s_img, s_lbl, source_k, id=tag + "|source")
    t_img, t_lbl = sample(tgt_proto, n_per_class, target_k)
    target = Dataset(t_img, t_lbl, target_k, id=tag + "|target")
    by_class = [np.flatnonzero(target.labels == c) for c in range(target_k)]
    tr, va, te = _split_counts(by_class, per_class_train, val_fraction, rng)
    t_train = subset(target, rng.permutation(tr))
    means = channel_means_of(t_train)
    return TransferTaskPair(source, normalize_with(t_train, means),
                            normalize_with(subset(target, va), means),
                            normalize_with(subset(target, te), means), per_class_train)


# --------------------------------------------------------------------------
# glyph digits (desk-scale stand-in for the usual handwritten digit files)
# --------------------------------------------------------------------------

_DIGIT_GLYPHS = [
    "01110 10001 10011 10101 11001 10001 01110",  # 0
    "00100 01100 00100 00100 00100 00100 01110",  # 1
    "01110 10001 00001 00010 00100 01000 11111",  # 2
    "11111 00010 00100 00010 00001 10001 01110",  # 3
    "00010 00110 01010 10010 11111 00010 00010",  # 4
    "11111 10000 11110 00001 00001 10001 01110",  # 5
    "00110 01000 10000 11110 10001 10001 01110",  # 6
    "11111 00001 00010 00100 01000 01000 01000",  # 7
    "01110 10001 10001 01110 10001 10001 01110",  # 8
    "01110 10001 10001 01111 00001 00010 01100",  # 9
]


def render_digits(n_per_class: int, seed: int, classes=tuple(range(10)),
                  image_size: int = 28, noise: float = 0.22, scales=(2, 3),
                  clutter_prob: float = 0.6) -> Dataset:
    """Render glyph digits as (N, 1, size, size) images in [0, 1].

    Per-image variability: glyph scale drawn from ``scales``, random placement
    within the canvas, intensity in [0.4, 1.0], optional bright clutter blobs
    and pixel noise.  Hard enough that a few samples per class underdetermine
    the task, while staying cleanly learnable from hundreds.
    """
    rng = np.random.default_rng(seed)
    glyphs = {}
    for c in classes:
        rows = _DIGIT_GLYPHS[c].split()
        bitmap = np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)
        glyphs[c] = {s: np.kron(bitmap, np.ones((s, s))) for s in scales}
    if any(7 * s > image_size or 5 * s > image_size for s in scales):
        raise ValueError("glyph does not fit the image")
    n = n_per_class * len(classes)
    images = np.zeros((n, 1, image_size, image_size))
    labels = np.zeros(n, dtype=np.int64)
    i = 0
    for c in classes:
        for _ in range(n_per_class):
            s = scales[int(rng.integers(0, len(scales)))]
            gh, gw = glyphs[c][s].shape
            r = int(rng.integers(0, image_size - gh + 1))
            col = int(rng.integers(0, image_size - gw + 1))
            images[i, 0, r:r + gh, col:col + gw] = rng.uniform(0.4, 1.0) * glyphs[c][s]
            if rng.random() < clutter_prob:
                for _ in range(int(rng.integers(1, 4))):
                    bh, bw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
                    br = int(rng.integers(0, image_size - bh + 1))
                    bc = int(rng.integers(0, image_size - bw + 1))
                    images[i, 0, br:br + bh, bc:bc + bw] = np.maximum(
                        images[i, 0, br:br + bh, bc:bc + bw], rng.uniform(0.4, 1.0))
            labels[i] = c
            i += 1
    images += noise * rng.standard_normal(images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], max(classes) + 1,
                   id=f"digits(n={n_per_class},seed={seed},size={image_size},noise={noise})")


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentOptions:
    mirror: bool = False
    crop_pad: int = 0
    blur_prob: float = 0.0


def _box_blur3(imgs: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge-replicating padding."""
    padded = np.pad(imgs, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(imgs)
    h, w = imgs.shape[2:]
    for di in range(3):
        for dj in range(3):
            out += padded[:, :, di:di + h, dj:dj + w]
    return out / 9.0


def augment(batch: np.ndarray, seed: int, opts: AugmentOptions) -> np.ndarray:
    """Per-image random mirror, pad-and-crop translation, and box blur.

    Draw order is fixed (mirror coins, crop offsets, blur coins) so results
    are reproducible from the seed alone.
    """
    if opts.crop_pad < 0:
        raise ValueError("crop_pad must be >= 0")
    batch = np.asarray(batch, dtype=np.float64)
    out = batch.copy()
    b = batch.shape[0]
    rng = np.random.default_rng(seed)
    if opts.mirror:
        flips = rng.random(b) < 0.5
        out[flips] = out[flips, :, :, ::-1]
    if opts.crop_pad > 0:
        p = opts.crop_pad
        offsets = rng.integers(0, 2 * p + 1, size=(b, 2))
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        h, w = batch.shape[2:]
        for i in range(b):
            r, c = offsets[i]
            out[i] = padded[i, :, r:r + h, c:c + w]
    if opts.blur_prob > 0:
        blurs = rng.random(b) < opts.blur_prob
        if blurs.any():
            out[blurs] = _box_blur3(out[blurs])
    return out
