"""Layer and model specifications for the split CNN.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` plus a cut
position. Everything before the cut runs on the client, everything from the
cut onward runs on the server.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

KINDS = ("Conv2d", "ReLU", "MaxPool2d", "Flatten", "Linear")


class SpecError(ValueError):
    """Raised for malformed layer or model specifications."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("Conv2d", "Linear"):
            if self.in_features < 1 or self.out_features < 1:
                raise SpecError(f"{self.kind} needs positive in/out sizes")
        elif self.in_features or self.out_features:
            raise SpecError(f"{self.kind} takes no size parameters")

    @property
    def has_params(self) -> bool:
        return self.kind in ("Conv2d", "Linear")

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Shapes of (weight, bias) for parametric layers, else empty."""
        if self.kind == "Conv2d":
            return [(self.out_features, self.in_features, 3, 3), (self.out_features,)]
        if self.kind == "Linear":
            return [(self.out_features, self.in_features), (self.out_features,)]
        return []

    def fan_in(self) -> int:
        if self.kind == "Conv2d":
            return self.in_features * 9
        return self.in_features

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-example output shape; raises SpecError on mismatch."""
        if self.kind == "Conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.in_features:
                raise SpecError(f"Conv2d expects {self.in_features} channels, got shape {in_shape}")
            # 3x3 kernel, padding 1: spatial dims preserved
            return (self.out_features, in_shape[1], in_shape[2])
        if self.kind == "ReLU":
            return tuple(in_shape)
        if self.kind == "MaxPool2d":
            if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
                raise SpecError(f"MaxPool2d needs a C×H×W input with H, W >= 2, got {in_shape}")
            return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)
        if self.kind == "Flatten":
            return (prod(in_shape),)
        # Linear
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise SpecError(f"Linear expects {self.in_features} features, got shape {in_shape}")
        return (self.out_features,)


def conv(cin: int, cout: int) -> LayerSpec:
    return LayerSpec("Conv2d", cin, cout)


def linear(fin: int, fout: int) -> LayerSpec:
    return LayerSpec("Linear", fin, fout)


RELU = LayerSpec("ReLU")
POOL = LayerSpec("MaxPool2d")
FLATTEN = LayerSpec("Flatten")


@dataclass(frozen=True)
class Segment:
    """A contiguous run of layers; ``start`` is the global index of the first."""

    layers: tuple[LayerSpec, ...]
    start: int
    input_shape: tuple[int, ...]

    @property
    def stop(self) -> int:
        return self.start + len(self.layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-example shapes: input followed by each layer's output."""
        out = [tuple(self.input_shape)]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def param_count(self) -> int:
        return sum(prod(s) for layer in self.layers for s in layer.param_shapes())


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    split_index: int
    input_shape: tuple[int, ...] = field(default=(1, 28, 28))

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if any(d < 1 for d in self.input_shape):
            raise SpecError(f"input dims must be positive, got {self.input_shape}")
        if not 0 < self.split_index < len(self.layers):
            raise SpecError(
                f"split_index must lie in (0, {len(self.layers)}), got {self.split_index}"
            )
        self.full.shapes()  # validates consecutive layer shapes

    @property
    def full(self) -> Segment:
        return Segment(self.layers, 0, self.input_shape)

    @property
    def client(self) -> Segment:
        return Segment(self.layers[: self.split_index], 0, self.input_shape)

    @property
    def server(self) -> Segment:
        cut = self.client.output_shape
        return Segment(self.layers[self.split_index :], self.split_index, cut)


def table_ii(depth: int = 1, height: int = 28, width: int = 28, split_index: int = 3) -> ModelSpec:
    """The two-conv CNN used throughout: conv-relu-pool | conv-relu-pool-fc-relu-fc."""
    flat = 64 * (height // 2 // 2) * (width // 2 // 2)
    layers = (
        conv(depth, 32), RELU, POOL,
        conv(32, 64), RELU, POOL, FLATTEN,
        linear(flat, 128), RELU, linear(128, 10),
    )
    return ModelSpec(layers, split_index, (depth, height, width))
