"""Layer descriptors and the canonical text form of a classifier architecture."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    channels: int

    def text(self) -> str:
        return f"conv={self.kh}x{self.kw}x{self.channels}"


@dataclass(frozen=True)
class MaxPool:
    ph: int
    pw: int

    def text(self) -> str:
        return f"maxpool={self.ph}x{self.pw}"


@dataclass(frozen=True)
class Dense:
    units: int

    def text(self) -> str:
        return f"dense={self.units}"


@dataclass(frozen=True)
class Dropout:
    rate: float

    def text(self) -> str:
        return f"dropout={self.rate!r}"


@dataclass(frozen=True)
class SoftmaxHead:
    classes: int

    def text(self) -> str:
        return f"softmax={self.classes}"


Layer = Union[Conv, MaxPool, Dense, Dropout, SoftmaxHead]


@dataclass(frozen=True)
class ArchitectureSpec:
    """Plain feed-forward stack: conv/pool blocks, then dense layers, then a softmax head.

    Conv and hidden dense layers carry a ReLU. Convolutions are unpadded with
    stride 1; pooling windows are non-overlapping and drop any remainder.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates composition

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape after every layer (index 0 is the input shape)."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchitectureError(f"bad input shape {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], SoftmaxHead):
            raise ArchitectureError("architecture must end with a softmax head")
        shape: tuple[int, ...] = self.input_shape
        out = [shape]
        flat = False
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SoftmaxHead) and i != len(self.layers) - 1:
                raise ArchitectureError("softmax head must be the last layer")
            if isinstance(layer, Conv):
                if flat:
                    raise ArchitectureError("conv after dense layer")
                if min(layer.kh, layer.kw, layer.channels) < 1:
                    raise ArchitectureError(f"degenerate conv {layer}")
                h, w, _ = shape
                if layer.kh > h or layer.kw > w:
                    raise ArchitectureError(f"conv kernel {layer.kh}x{layer.kw} exceeds {h}x{w}")
                shape = (h - layer.kh + 1, w - layer.kw + 1, layer.channels)
            elif isinstance(layer, MaxPool):
                if flat:
                    raise ArchitectureError("pooling after dense layer")
                if min(layer.ph, layer.pw) < 1:
                    raise ArchitectureError(f"degenerate pool {layer}")
                h, w, c = shape
                if layer.ph > h or layer.pw > w:
                    raise ArchitectureError(f"pool window {layer.ph}x{layer.pw} exceeds {h}x{w}")
                shape = (h // layer.ph, w // layer.pw, c)
            elif isinstance(layer, Dense):
                if layer.units < 1:
                    raise ArchitectureError(f"dense layer needs at least one unit, got {layer.units}")
                flat = True
                shape = (layer.units,)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise ArchitectureError(f"dropout rate {layer.rate} outside [0,1)")
            elif isinstance(layer, SoftmaxHead):
                if layer.classes < 2:
                    raise ArchitectureError("need at least two classes")
                shape = (layer.classes,)
            else:
                raise ArchitectureError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(weight shape, bias shape) for each parametrised layer, in order."""
        result = []
        shapes = self.shapes()
        for layer, inshape in zip(self.layers, shapes[:-1]):
            if isinstance(layer, Conv):
                result.append(((layer.kh, layer.kw, inshape[-1], layer.channels), (layer.channels,)))
            elif isinstance(layer, (Dense, SoftmaxHead)):
                fan_in = 1
                for d in inshape:
                    fan_in *= d
                units = layer.units if isinstance(layer, Dense) else layer.classes
                result.append(((fan_in, units), (units,)))
        return result

    @property
    def param_count(self) -> int:
        total = 0
        for wshape, bshape in self.param_shapes():
            n = 1
            for d in wshape:
                n *= d
            total += n + bshape[0]
        return total

    def to_text(self) -> str:
        h, w, c = self.input_shape
        parts = [f"input={h}x{w}x{c}"] + [layer.text() for layer in self.layers]
        if self.name:
            parts.insert(0, f"name={self.name}")
        return ";".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        name = ""
        input_shape = None
        layers: list[Layer] = []
        for part in text.strip().split(";"):
            key, _, value = part.partition("=")
            try:
                if key == "name":
                    name = value
                elif key == "input":
                    input_shape = tuple(int(v) for v in value.split("x"))
                elif key == "conv":
                    layers.append(Conv(*(int(v) for v in value.split("x"))))
                elif key == "maxpool":
                    layers.append(MaxPool(*(int(v) for v in value.split("x"))))
                elif key == "dense":
                    layers.append(Dense(int(value)))
                elif key == "dropout":
                    layers.append(Dropout(float(value)))
                elif key == "softmax":
                    layers.append(SoftmaxHead(int(value)))
                else:
                    raise ArchitectureError(f"unknown layer key {key!r}")
            except (TypeError, ValueError) as exc:
                raise ArchitectureError(f"cannot parse {part!r}: {exc}") from None
        if input_shape is None:
            raise ArchitectureError("descriptor lacks an input shape")
        return cls(input_shape, tuple(layers), name)
