"""Architecture descriptors for the fixed layer vocabulary.

An architecture is an ordered list of layer descriptors plus the input
image shape.  The descriptor string is the canonical wire form used in
model files, e.g.::

    input 28x28x1; conv 32 3x3 relu; conv 32 3x3 relu; pool 2x2;
    conv 64 3x3 relu; conv 64 3x3 relu; pool 2x2; fc 200 relu;
    fc 200 relu; softmax 10

Convolutions are valid-padding stride 1; pooling stride equals the pool
size.  The final layer must be a softmax head (a dense projection to the
class logits followed by softmax).
"""

from __future__ import annotations

from dataclasses import dataclass


class ArchitectureError(ValueError):
    """Raised for malformed descriptors or layer shape mismatches."""


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel_h: int
    kernel_w: int
    relu: bool = True


@dataclass(frozen=True)
class MaxPool:
    pool_h: int
    pool_w: int


@dataclass(frozen=True)
class FullyConnected:
    units: int
    relu: bool = True


@dataclass(frozen=True)
class Softmax:
    classes: int


Layer = Conv | MaxPool | FullyConnected | Softmax


@dataclass(frozen=True)
class ArchitectureSpec:
    input_h: int
    input_w: int
    input_c: int
    layers: tuple[Layer, ...]

    def __post_init__(self) -> None:
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ArchitectureError("final layer must be softmax")
        self.layer_shapes()  # validates

    @property
    def classes(self) -> int:
        head = self.layers[-1]
        assert isinstance(head, Softmax)
        return head.classes

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer; raises if any layer cannot accept its input."""
        shapes: list[tuple[int, ...]] = []
        shape: tuple[int, ...] = (self.input_h, self.input_w, self.input_c)
        for i, layer in enumerate(self.layers):
            name = f"layer {i} ({type(layer).__name__.lower()})"
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ArchitectureError(f"{name}: expects an image input, got {shape}")
                h, w, _ = shape
                oh, ow = h - layer.kernel_h + 1, w - layer.kernel_w + 1
                if oh < 1 or ow < 1:
                    raise ArchitectureError(f"{name}: kernel {layer.kernel_h}x{layer.kernel_w} larger than input {h}x{w}")
                shape = (oh, ow, layer.filters)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ArchitectureError(f"{name}: expects an image input, got {shape}")
                h, w, c = shape
                oh, ow = h // layer.pool_h, w // layer.pool_w
                if oh < 1 or ow < 1:
                    raise ArchitectureError(f"{name}: pool {layer.pool_h}x{layer.pool_w} larger than input {h}x{w}")
                shape = (oh, ow, c)
            elif isinstance(layer, FullyConnected):
                n = 1
                for d in shape:
                    n *= d
                if layer.units < 1:
                    raise ArchitectureError(f"{name}: units must be positive")
                shape = (layer.units,)
            elif isinstance(layer, Softmax):
                if i != len(self.layers) - 1:
                    raise ArchitectureError(f"{name}: softmax must be the final layer")
                if layer.classes < 2:
                    raise ArchitectureError(f"{name}: needs at least 2 classes")
                shape = (layer.classes,)
            shapes.append(shape)
        return shapes

    def describe(self) -> str:
        parts = [f"input {self.input_h}x{self.input_w}x{self.input_c}"]
        for layer in self.layers:
            if isinstance(layer, Conv):
                parts.append(f"conv {layer.filters} {layer.kernel_h}x{layer.kernel_w}" + (" relu" if layer.relu else ""))
            elif isinstance(layer, MaxPool):
                parts.append(f"pool {layer.pool_h}x{layer.pool_w}")
            elif isinstance(layer, FullyConnected):
                parts.append(f"fc {layer.units}" + (" relu" if layer.relu else ""))
            elif isinstance(layer, Softmax):
                parts.append(f"softmax {layer.classes}")
        return "; ".join(parts)

    @staticmethod
    def parse(text: str) -> "ArchitectureSpec":
        items = [part.strip() for part in text.split(";") if part.strip()]
        if not items or not items[0].startswith("input "):
            raise ArchitectureError("descriptor must start with an 'input HxWxC' clause")
        try:
            h, w, c = (int(v) for v in items[0].split()[1].split("x"))
        except (IndexError, ValueError) as exc:
            raise ArchitectureError(f"bad input clause: {items[0]!r}") from exc
        layers: list[Layer] = []
        for item in items[1:]:
            fields = item.split()
            kind = fields[0]
            try:
                if kind == "conv":
                    kh, kw = (int(v) for v in fields[2].split("x"))
                    layers.append(Conv(int(fields[1]), kh, kw, relu="relu" in fields[3:]))
                elif kind == "pool":
                    ph, pw = (int(v) for v in fields[1].split("x"))
                    layers.append(MaxPool(ph, pw))
                elif kind == "fc":
                    layers.append(FullyConnected(int(fields[1]), relu="relu" in fields[2:]))
                elif kind == "softmax":
                    layers.append(Softmax(int(fields[1])))
                else:
                    raise ArchitectureError(f"unknown layer kind {kind!r}")
            except (IndexError, ValueError) as exc:
                raise ArchitectureError(f"bad layer clause: {item!r}") from exc
        return ArchitectureSpec(h, w, c, tuple(layers))


def preset(name: str, *, input_side: int = 28, input_channels: int = 1, classes: int = 10) -> ArchitectureSpec:
    """Named architectures.

    ``cnn-a`` is the full 32/32-64/64-200/200 convolutional stack; ``cnn-a-small``
    is the reduced 8/8-16/16-64/64 variant used for fast desk-scale runs.
    """
    if name == "cnn-a":
        widths, fc = (32, 64), 200
    elif name == "cnn-a-small":
        widths, fc = (8, 16), 64
    else:
        raise ArchitectureError(f"unknown architecture preset {name!r}")
    layers: list[Layer] = []
    for filters in widths:
        layers += [Conv(filters, 3, 3), Conv(filters, 3, 3), MaxPool(2, 2)]
    layers += [FullyConnected(fc), FullyConnected(fc), Softmax(classes)]
    return ArchitectureSpec(input_side, input_side, input_channels, tuple(layers))
