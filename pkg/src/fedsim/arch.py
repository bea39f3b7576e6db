"""Model architecture descriptions: layer specs and static shape tracing.

An architecture is the fixed skeleton of a network (layer kinds, kernels,
activations, input window geometry).  Layer widths recorded here are the
*initial* widths; actual widths live in the weight containers and may grow,
so everything downstream reads dimensions from the weights and only kinds,
kernels and activations from the architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

DENSE = "dense"
CONV1D = "conv1d"
MAXPOOL1D = "maxpool1d"
SOFTMAX_OUTPUT = "softmax-output"

LAYER_KINDS = (DENSE, CONV1D, MAXPOOL1D, SOFTMAX_OUTPUT)
PARAM_KINDS = (DENSE, CONV1D, SOFTMAX_OUTPUT)
ACTIVATIONS = ("relu", "none")


class ArchError(ValueError):
    """Raised for invalid architecture descriptions."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network skeleton.

    width is the unit/filter count (dense units, conv output channels, or
    class count for the softmax output); kernel is the window length for
    conv/pool layers.
    """

    kind: str
    width: int | None = None
    kernel: int | None = None
    activation: str = "none"

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ArchError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAM_KINDS:
            if self.width is None or self.width < 1:
                raise ArchError(f"{self.kind} layer needs width >= 1")
        if self.kind in (CONV1D, MAXPOOL1D):
            if self.kernel is None or self.kernel < 1:
                raise ArchError(f"{self.kind} layer needs kernel >= 1")
        if self.activation not in ACTIVATIONS:
            raise ArchError(f"unknown activation {self.activation!r}")
        if self.kind == SOFTMAX_OUTPUT and self.activation != "none":
            raise ArchError("softmax-output applies softmax; no extra activation")


@dataclass(frozen=True)
class ParamShape:
    """Static shape info for one parameterized layer."""

    spec_index: int
    kind: str
    incoming_shape: tuple[int, ...]  # dense: (fan_in, width); conv: (kernel, in_ch, width)
    width: int
    activation: str


@dataclass(frozen=True)
class ModelArch:
    """Network skeleton plus the input contract (window length x channels).

    Flat (non-windowed) inputs use input_channels = 1.
    """

    input_length: int
    input_channels: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        if self.input_length < 1 or self.input_channels < 1:
            raise ArchError("input dimensions must be >= 1")
        if len(self.layers) < 2:
            raise ArchError("a model needs at least 2 layers")
        if self.layers[-1].kind != SOFTMAX_OUTPUT:
            raise ArchError("final layer must be softmax-output")
        for i, spec in enumerate(self.layers[:-1]):
            if spec.kind == SOFTMAX_OUTPUT:
                raise ArchError(f"layer {i}: softmax-output only allowed last")
        # Walk shapes once so bad stacks fail at construction.
        self.trace()

    @property
    def classes(self) -> int:
        w = self.layers[-1].width
        assert w is not None
        return w

    def trace(self) -> list[ParamShape]:
        """Walk the stack and return per-parameterized-layer shapes.

        Spatial state is tracked as (time, channels); the first dense layer
        flattens it channel-major (unit c occupies rows [c*T, (c+1)*T) of the
        dense input), which keeps appended conv filters at the tail of the
        flattened vector.
        """
        time: int | None = self.input_length
        channels = self.input_channels
        flat: int | None = None
        out: list[ParamShape] = []
        for i, spec in enumerate(self.layers):
            if spec.kind == CONV1D:
                if time is None:
                    raise ArchError(f"layer {i}: conv1d after flatten")
                assert spec.kernel is not None and spec.width is not None
                if time < spec.kernel:
                    raise ArchError(
                        f"layer {i}: conv kernel {spec.kernel} exceeds length {time}"
                    )
                out.append(
                    ParamShape(i, CONV1D, (spec.kernel, channels, spec.width),
                               spec.width, spec.activation)
                )
                time = time - spec.kernel + 1
                channels = spec.width
            elif spec.kind == MAXPOOL1D:
                if time is None:
                    raise ArchError(f"layer {i}: maxpool1d after flatten")
                assert spec.kernel is not None
                if time < spec.kernel:
                    raise ArchError(
                        f"layer {i}: pool kernel {spec.kernel} exceeds length {time}"
                    )
                time = time // spec.kernel
            else:  # dense or softmax-output
                if flat is None:
                    assert time is not None
                    flat = time * channels
                    time = None
                assert spec.width is not None
                out.append(
                    ParamShape(i, spec.kind, (flat, spec.width), spec.width,
                               spec.activation)
                )
                flat = spec.width
        return out

    def param_indices(self) -> list[int]:
        """Spec indices of parameterized layers, in order."""
        return [p.spec_index for p in self.trace()]

    def with_widths(self, widths: tuple[int, ...] | list[int]) -> "ModelArch":
        """Same skeleton with parameterized-layer widths replaced.

        Used to re-instantiate a grown shape from a shape signature.  The
        output width must stay equal to the class count.
        """
        idx = self.param_indices()
        if len(widths) != len(idx):
            raise ArchError(
                f"shape has {len(widths)} widths, architecture has {len(idx)} "
                "parameterized layers"
            )
        if widths[-1] != self.classes:
            raise ArchError("output width must equal the class count")
        layers = list(self.layers)
        for w, i in zip(widths, idx):
            if w < layers[i].width:  # type: ignore[operator]
                raise ArchError(f"layer {i}: width {w} below base width")
            layers[i] = replace(layers[i], width=int(w))
        return ModelArch(self.input_length, self.input_channels, tuple(layers))
