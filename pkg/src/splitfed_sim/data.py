"""Datasets, non-IID partitioning and label poisoning."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

NUM_CLASSES = 10
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (N, D, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx])

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)


def gen_blobs(per_class: int, side: int = 14, seed: int = 0, noise: float = 0.25,
              jitter: int = 1) -> Dataset:
    """Synthetic 10-class images: one blurred random template per class.

    Templates sit at class-specific positions on a ring so neighbouring
    classes overlap. Each example is the template shifted by up to
    ``jitter`` pixels per axis plus Gaussian pixel noise, clipped to [0, 1].
    With ``noise=0`` and ``jitter=0`` all examples of a class are identical.
    """
    if side < 8:
        raise ValueError("side must be at least 8")
    rng = np.random.default_rng(seed)
    templates = np.zeros((NUM_CLASSES, side, side), dtype=np.float64)
    patch = max(3, side // 2)
    radius = side / 4.0
    for c in range(NUM_CLASSES):
        angle = 2 * np.pi * c / NUM_CLASSES
        cy = int(round(side / 2 + radius * np.sin(angle) - patch / 2))
        cx = int(round(side / 2 + radius * np.cos(angle) - patch / 2))
        cy = min(max(cy, 0), side - patch)
        cx = min(max(cx, 0), side - patch)
        canvas = np.zeros((side, side))
        canvas[cy : cy + patch, cx : cx + patch] = rng.random((patch, patch)) > 0.4
        canvas = gaussian_filter(canvas, sigma=side / 14.0)
        templates[c] = canvas / canvas.max()
    labels = np.repeat(np.arange(NUM_CLASSES), per_class)
    images = templates[labels]
    if jitter > 0:
        shifts = rng.integers(-jitter, jitter + 1, size=(len(labels), 2))
        images = np.stack([_shift(img, dy, dx) for img, (dy, dx) in zip(images, shifts)])
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)[:, None]
    order = rng.permutation(len(labels))
    return Dataset(np.ascontiguousarray(images[order]), labels[order].astype(np.int64))


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = img[
        max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)
    ]
    return out


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    payload = raw[4 + 4 * ndim :]
    if len(payload) != int(np.prod(dims)):
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {int(np.prod(dims))}")
    return dims, payload


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (e.g. Fashion-MNIST) scaled to [0, 1]."""
    idims, ipay = _read_idx(images_path, IDX_IMAGES_MAGIC)
    ldims, lpay = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise DataFormatError(f"image count {idims[0]} != label count {ldims[0]}")
    images = np.frombuffer(ipay, dtype=np.uint8).reshape(idims[0], 1, idims[1], idims[2])
    labels = np.frombuffer(lpay, dtype=np.uint8).astype(np.int64)
    return Dataset((images / np.float32(255)).astype(np.float32), labels)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for 1-channel datasets (values rounded to u8)."""
    n, _, h, w = ds.images.shape
    pix = np.rint(ds.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    )


def holdout(ds: Dataset, val_fraction: float, test_fraction: float, seed: int):
    """Shuffle and carve off validation and test sets; returns (train, val, test)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    n_test = int(round(test_fraction * len(ds)))
    val = ds.subset(order[:n_val])
    test = ds.subset(order[n_val : n_val + n_test])
    train = ds.subset(order[n_val + n_test :])
    return train, val, test


@dataclass(frozen=True)
class PartitionPlan:
    node_count: int
    seed: int = 0
    scheme: str = "label_shards"
    alpha: float = 0.5
    shards_per_node: int = 2

    def __post_init__(self):
        if self.scheme not in ("label_shards", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")


def partition(ds: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split into ``node_count`` equal-size, disjoint, label-skewed slices.

    The remainder after equal division is dropped. Each slice is shuffled.
    """
    n_nodes = plan.node_count
    if n_nodes < 1:
        raise ValueError("node_count must be positive")
    if n_nodes > len(ds):
        raise ValueError(f"node_count {n_nodes} exceeds dataset length {len(ds)}")
    rng = np.random.default_rng(plan.seed)
    per_node = len(ds) // n_nodes
    if plan.scheme == "label_shards":
        slices = _label_shards(ds.labels, n_nodes, per_node, plan.shards_per_node, rng)
    else:
        slices = _dirichlet(ds.labels, n_nodes, per_node, plan.alpha, rng)
    return [ds.subset(rng.permutation(idx)) for idx in slices]


def _label_shards(labels, n_nodes, per_node, shards_per_node, rng):
    keep = rng.permutation(len(labels))[: n_nodes * per_node]
    ordered = keep[np.argsort(labels[keep], kind="stable")]
    # shard k of every node has the same size so node totals stay exactly per_node
    sizes = [len(part) for part in np.array_split(np.arange(per_node), shards_per_node)]
    pieces = []
    pos = 0
    for size in sizes:
        group = [ordered[pos + i * size : pos + (i + 1) * size] for i in range(n_nodes)]
        pos += size * n_nodes
        pieces.append([group[i] for i in rng.permutation(n_nodes)])
    return [np.concatenate([pieces[k][node] for k in range(len(sizes))]) for node in range(n_nodes)]


def _dirichlet(labels, n_nodes, per_node, alpha, rng):
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(NUM_CLASSES)]
    slices = []
    for _ in range(n_nodes):
        props = rng.dirichlet(np.full(NUM_CLASSES, alpha))
        want = rng.multinomial(per_node, props)
        take = []
        for c in range(NUM_CLASSES):
            k = min(want[c], len(pools[c]))
            take.extend(pools[c][:k])
            del pools[c][:k]
        while len(take) < per_node:
            # refill from the classes that still have examples, largest pool first
            c = max(range(NUM_CLASSES), key=lambda k: (len(pools[k]), -k))
            take.append(pools[c].pop(0))
        slices.append(np.array(take, dtype=np.intp))
    return slices


def poison_labels(ds: Dataset, flip_fraction: float = 1.0, seed: int = 0) -> Dataset:
    """Shift labels y -> (y + 1) mod 10 on a seeded random fraction of examples."""
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError("flip_fraction must lie in [0, 1]")
    labels = ds.labels.copy()
    count = int(round(flip_fraction * len(ds)))
    if count:
        idx = np.random.default_rng(seed).permutation(len(ds))[:count]
        labels[idx] = (labels[idx] + 1) % NUM_CLASSES
    return Dataset(ds.images, labels)
