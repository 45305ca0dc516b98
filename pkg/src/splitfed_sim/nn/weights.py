"""Flat parameter vectors, weight algebra and the SFW1 container format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

from .layers import ModelSpec, Segment

MAGIC = b"SFW1"


class LayoutError(ValueError):
    """Two weight or gradient vectors do not share a layout."""


class FormatError(ValueError):
    """A serialized weight container is malformed."""


@dataclass(frozen=True)
class TensorEntry:
    layer_index: int
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return prod(self.shape)


Manifest = tuple[TensorEntry, ...]


def build_manifest(segment: Segment) -> Manifest:
    entries = []
    offset = 0
    for i, layer in enumerate(segment.layers):
        for shape in layer.param_shapes():
            entries.append(TensorEntry(segment.start + i, tuple(shape), offset))
            offset += prod(shape)
    return tuple(entries)


@dataclass(frozen=True, eq=False)
class Weights:
    """Flat float32 parameter vector plus the manifest describing it.

    Entries are ordered by layer, weight tensor before bias. Treat instances
    as immutable: every operation returns a new vector.
    """

    values: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        expected = sum(e.size for e in self.manifest)
        if self.values.ndim != 1 or self.values.size != expected:
            raise LayoutError(f"values length {self.values.size} != manifest total {expected}")
        offset = 0
        for e in self.manifest:
            if e.offset != offset:
                raise LayoutError(f"manifest offsets not contiguous at layer {e.layer_index}")
            offset += e.size

    def __len__(self) -> int:
        return self.values.size

    def tensors(self, layer_index: int) -> list[np.ndarray]:
        """Views of the (weight, bias) tensors of one layer."""
        return [
            self.values[e.offset : e.offset + e.size].reshape(e.shape)
            for e in self.manifest
            if e.layer_index == layer_index
        ]

    def same_layout(self, other) -> bool:
        return self.manifest == other.manifest

    def equals(self, other: "Weights") -> bool:
        """Bitwise equality of layout and values."""
        return (
            self.same_layout(other)
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )

    def astype(self, dtype) -> "Weights":
        return Weights(self.values.astype(dtype), self.manifest)

    def copy(self) -> "Weights":
        return Weights(self.values.copy(), self.manifest)


@dataclass(frozen=True, eq=False)
class Gradients:
    values: np.ndarray
    manifest: Manifest
    input_grad: np.ndarray | None

    def tensors(self, layer_index: int) -> list[np.ndarray]:
        return Weights.tensors(self, layer_index)  # type: ignore[arg-type]

    def same_layout(self, other) -> bool:
        return self.manifest == other.manifest


def init_model(spec: ModelSpec | Segment, seed: int) -> Weights:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and zero biases."""
    segment = spec.full if isinstance(spec, ModelSpec) else spec
    segment.shapes()
    rng = np.random.default_rng(seed)
    manifest = build_manifest(segment)
    values = np.zeros(sum(e.size for e in manifest), dtype=np.float32)
    for e in manifest:
        layer = segment.layers[e.layer_index - segment.start]
        if len(e.shape) == 1:
            continue  # bias
        bound = 1.0 / np.sqrt(layer.fan_in())
        values[e.offset : e.offset + e.size] = rng.uniform(-bound, bound, e.size)
    return Weights(values, manifest)


def zeros_like(w: Weights) -> Weights:
    return Weights(np.zeros_like(w.values), w.manifest)


def concat(first: Weights, second: Weights) -> Weights:
    """Join client and server weights into the composite model's vector."""
    shift = first.values.size
    manifest = first.manifest + tuple(
        TensorEntry(e.layer_index, e.shape, e.offset + shift) for e in second.manifest
    )
    return Weights(np.concatenate([first.values, second.values]), manifest)


def split(w: Weights, split_index: int) -> tuple[Weights, Weights]:
    """Inverse of :func:`concat` at a layer cut."""
    head = tuple(e for e in w.manifest if e.layer_index < split_index)
    tail = tuple(e for e in w.manifest if e.layer_index >= split_index)
    cut = sum(e.size for e in head)
    tail = tuple(TensorEntry(e.layer_index, e.shape, e.offset - cut) for e in tail)
    return Weights(w.values[:cut].copy(), head), Weights(w.values[cut:].copy(), tail)


def sgd_step(w: Weights, g: Gradients | Weights, lr: float) -> Weights:
    if w.manifest != g.manifest:
        raise LayoutError("weights and gradients have different layouts")
    step = np.asarray(lr, dtype=w.values.dtype)
    return Weights(w.values - step * g.values.astype(w.values.dtype, copy=False), w.manifest)


def fedavg(ws: Sequence[Weights]) -> Weights:
    """Equal-weight elementwise mean, summed left to right in input order."""
    if not ws:
        raise ValueError("fedavg needs at least one model")
    first = ws[0]
    for w in ws[1:]:
        if not first.same_layout(w):
            raise LayoutError("fedavg inputs have different layouts")
    if len(ws) == 1:
        return first.copy()
    total = first.values.copy()
    for w in ws[1:]:
        total += w.values
    mean = total / np.asarray(len(ws), dtype=total.dtype)
    return Weights(mean.astype(first.values.dtype, copy=False), first.manifest)


_HEADER = struct.Struct("<4sI")
_U32 = struct.Struct("<I")


def serialize(w: Weights) -> bytes:
    parts = [_HEADER.pack(MAGIC, len(w.manifest))]
    for e in w.manifest:
        parts.append(_U32.pack(e.layer_index))
        parts.append(_U32.pack(len(e.shape)))
        parts.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
    parts.append(w.values.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def deserialize(data: bytes) -> Weights:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    pos = _HEADER.size
    entries = []
    offset = 0
    for _ in range(count):
        if pos + 8 > len(data):
            raise FormatError("truncated manifest")
        layer_index, rank = struct.unpack_from("<II", data, pos)
        pos += 8
        if pos + 4 * rank > len(data):
            raise FormatError("truncated manifest")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        if rank == 0 or any(d == 0 for d in dims):
            raise FormatError(f"invalid tensor dims {dims} for layer {layer_index}")
        entries.append(TensorEntry(layer_index, tuple(dims), offset))
        offset += prod(dims)
    payload = len(data) - pos
    if payload != 4 * offset:
        raise FormatError(
            f"payload holds {payload} bytes but manifest declares {offset} float32 values"
        )
    values = np.frombuffer(data, dtype="<f4", offset=pos, count=offset).astype(np.float32)
    return Weights(values, tuple(entries))
