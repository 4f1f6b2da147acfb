"""Datasets: IDX ingestion, a seeded synthetic shape generator, and stratified splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, H, W, channels) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    name: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise ValueError(f"images must be (N,H,W,C), got {images.shape}")
        if len(images) != len(labels) or labels.ndim != 1:
            raise ValueError("images and labels disagree in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes,
                       self.name if name is None else name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def concat(parts: list[Dataset], name: str = "") -> Dataset:
    classes = {p.classes for p in parts}
    if len(classes) != 1:
        raise ValueError("cannot concatenate datasets with different class counts")
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), classes.pop(), name)


# -- IDX ------------------------------------------------------------------------------

def _read_header(raw: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(raw) < need:
        raise DataFormatError(f"{what}: truncated header")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(">" + "I" * ndims, raw, 4)


def load_idx(images_path, labels_path, classes: int | None = None, name: str = "") -> Dataset:
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(img_raw, IMAGES_MAGIC, 3, "images file")
    (nl,) = _read_header(lab_raw, LABELS_MAGIC, 1, "labels file")
    if n != nl:
        raise DataFormatError(f"images file holds {n} items, labels file {nl}")
    if len(img_raw) < 16 + n * rows * cols:
        raise DataFormatError("images file truncated")
    if len(lab_raw) < 8 + n:
        raise DataFormatError("labels file truncated")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    images = pixels.reshape(n, rows, cols, 1) / 255.0
    if classes is None:
        classes = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels, classes, name or Path(images_path).stem)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    if ds.image_shape[2] != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    n, rows, cols, _ = ds.images.shape
    pixels = np.rint(ds.images[..., 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


# -- synthetic shapes -----------------------------------------------------------------

SYNTH_SIZE = 16


def _prototype(c: int, geometry_seed: int) -> np.ndarray:
    """A deterministic 16x16 shape for class ``c``.

    Shapes cycle through bars, rings, crosses, diagonal strokes and blocks; the
    geometry seed jitters position and size, and the cycle index changes scale,
    so prototypes stay distinct for any class count.
    """
    rng = np.random.default_rng([geometry_seed, c])
    s = SYNTH_SIZE
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    kind = c % 8
    tier = c // 8
    cy = 7.5 + rng.uniform(-1.5, 1.5)
    cx = 7.5 + rng.uniform(-1.5, 1.5)
    size = 3.0 + (tier % 3) * 1.5 + rng.uniform(0.0, 1.0)
    thick = 1.0 + 0.5 * (tier % 2)
    if kind == 0:  # horizontal bar
        img = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= size + 2)
    elif kind == 1:  # vertical bar
        img = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= size + 2)
    elif kind == 2:  # ring
        r = np.hypot(yy - cy, xx - cx)
        img = np.abs(r - size) <= thick
    elif kind == 3:  # filled disc
        img = np.hypot(yy - cy, xx - cx) <= size
    elif kind == 4:  # plus
        img = ((np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= size + 1)) | \
              ((np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= size + 1))
    elif kind == 5:  # main diagonal
        img = (np.abs((yy - cy) - (xx - cx)) <= thick * 1.4) & (np.abs(yy - cy) <= size + 2)
    elif kind == 6:  # anti-diagonal
        img = (np.abs((yy - cy) + (xx - cx)) <= thick * 1.4) & (np.abs(yy - cy) <= size + 2)
    else:  # hollow square
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        img = np.abs(d - size) <= thick * 0.75
    proto = img.astype(np.float64)
    if tier:
        # later cycles get a corner marker so they differ from the first cycle
        corner = tier % 4
        r0 = 1 if corner < 2 else s - 4
        c0 = 1 if corner % 2 == 0 else s - 4
        proto[r0:r0 + 3, c0:c0 + 3] = 1.0
    return proto


def synth_generate(classes: int, per_class: int, geometry_seed: int, noise: float = 0.05,
                   noise_seed: int | None = None, name: str = "synthetic") -> Dataset:
    """``per_class`` noisy copies of each class prototype, grouped by class.

    Prototypes depend only on ``geometry_seed``; pixel noise comes from
    ``noise_seed`` (defaults to the geometry seed), so a train and a test split
    of the same task share prototypes but not noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("need at least one sample per class")
    return synth_generate_counts([per_class] * classes, geometry_seed, noise, noise_seed, name)


def synth_generate_counts(counts, geometry_seed: int, noise: float = 0.05, noise_seed: int | None = None,
                          name: str = "synthetic") -> Dataset:
    """Like :func:`synth_generate` with an explicit sample count per class."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ValueError("need counts for at least two classes")
    if counts.min() < 0 or counts.sum() == 0:
        raise ValueError("counts must be non-negative and not all zero")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    classes = len(counts)
    protos = np.stack([_prototype(c, geometry_seed) for c in range(classes)])
    rng = np.random.default_rng([geometry_seed, 0x5EED if noise_seed is None else noise_seed, 1])
    labels = np.repeat(np.arange(classes), counts)
    images = protos[labels] + noise * rng.standard_normal((len(labels), SYNTH_SIZE, SYNTH_SIZE))
    images = np.clip(images, 0.0, 1.0)[..., None]
    return Dataset(images, labels, classes, name)


def balanced_counts(total: int, classes: int, fixed: dict[int, int] | None = None) -> list[int]:
    """Per-class counts summing to ``total``: ``fixed`` classes get their
    given count, the rest share the remainder as evenly as possible
    (earlier classes take the spare samples)."""
    fixed = dict(fixed or {})
    free = [c for c in range(classes) if c not in fixed]
    left = total - sum(fixed.values())
    if left < 0 or (free and left < len(free)):
        raise ValueError(f"{total} samples cannot cover the fixed class counts {fixed}")
    base, extra = divmod(left, len(free)) if free else (0, 0)
    out = []
    for c in range(classes):
        if c in fixed:
            out.append(int(fixed[c]))
        else:
            out.append(base + (1 if free.index(c) < extra else 0))
    return out


# -- splits ---------------------------------------------------------------------------

def subsample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified subset: round(fraction * count_c) samples of every class c."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        k = int(round(fraction * len(idx)))
        if k == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} empty")
        chosen.append(rng.permutation(idx)[:k])
    order = rng.permutation(np.concatenate(chosen))
    return ds.take(order, name=f"{ds.name}[{fraction:g}]")


def split_disjoint(ds: Dataset, parts: int, seed: int) -> list[Dataset]:
    """Stratified partition into ``parts`` pairwise-disjoint datasets."""
    if parts < 2:
        raise ValueError("need at least two parts")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(parts)]
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < parts:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than {parts} parts")
        for i, chunk in enumerate(np.array_split(rng.permutation(idx), parts)):
            buckets[i].append(chunk)
    return [ds.take(np.sort(np.concatenate(b)), name=f"{ds.name}[part{i}]")
            for i, b in enumerate(buckets)]


def stratified_sample(ds: Dataset, count: int, seed: int) -> Dataset:
    """Exactly ``count`` samples, apportioned over classes by largest remainder."""
    if not 0 <= count <= len(ds):
        raise ValueError(f"cannot draw {count} samples from {len(ds)}")
    rng = np.random.default_rng(seed)
    counts = ds.class_counts()
    quota = counts * (count / len(ds)) if len(ds) else counts.astype(float)
    take = np.floor(quota).astype(int)
    short = count - int(take.sum())
    # ties broken by class index
    order = sorted(range(ds.classes), key=lambda c: (-(quota[c] - take[c]), c))
    for c in order[:short]:
        take[c] += 1
    chosen = [rng.permutation(np.flatnonzero(ds.labels == c))[:take[c]] for c in range(ds.classes)]
    idx = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return ds.take(idx, name=f"{ds.name}[{count}]")
