"""Weight containers and shape manipulation.

ModelWeights values are treated as immutable once built: every operation in
this module returns a new value and never mutates its inputs, so models can
be shared freely across concurrently training clients.

Unit/filter growth always appends at the tail of a layer, so pre-existing
coordinates keep their identity.  Across a conv -> dense boundary the dense
input is flattened channel-major, which means one appended conv filter maps
to a contiguous block of (pooled time length) rows at the tail of the dense
incoming matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import CONV1D, DENSE, ModelArch


class ShapeError(ValueError):
    """Raised when weight shapes do not line up."""


@dataclass(frozen=True)
class LayerWeights:
    """Parameters of one layer.

    incoming: dense [fan_in, out]; conv1d [kernel, in_channels, out].
    bias: [out].
    """

    incoming: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.incoming.ndim not in (2, 3):
            raise ShapeError(f"incoming must be 2-D or 3-D, got {self.incoming.ndim}-D")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.incoming.shape[-1]:
            raise ShapeError(
                f"bias length {self.bias.shape} does not match out width "
                f"{self.incoming.shape[-1]}"
            )
        if not (np.isfinite(self.incoming).all() and np.isfinite(self.bias).all()):
            raise ShapeError("layer parameters must be finite")

    @property
    def kind(self) -> str:
        return DENSE if self.incoming.ndim == 2 else CONV1D

    @property
    def out_width(self) -> int:
        return int(self.incoming.shape[-1])

    @property
    def fan_in(self) -> int:
        """Flat incoming size per unit (kernel * in_channels for conv)."""
        return int(np.prod(self.incoming.shape[:-1]))

    @property
    def size(self) -> int:
        return self.incoming.size + self.bias.size


@dataclass(frozen=True)
class ModelWeights:
    """Ordered parameterized layers of one model.

    Pool layers carry no parameters and do not appear here; they live only
    in the architecture.
    """

    layers: tuple[LayerWeights, ...]

    def __post_init__(self) -> None:
        if len(self.layers) < 1:
            raise ShapeError("a model needs at least one parameterized layer")

    @property
    def shape_signature(self) -> tuple[int, ...]:
        return tuple(layer.out_width for layer in self.layers)

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].incoming.dtype

    @property
    def parameter_count(self) -> int:
        return sum(layer.size for layer in self.layers)

    def layer_shapes(self) -> tuple[tuple[tuple[int, ...], int], ...]:
        return tuple((layer.incoming.shape, layer.bias.shape[0]) for layer in self.layers)

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(tuple(
            LayerWeights(l.incoming.astype(dtype), l.bias.astype(dtype))
            for l in self.layers
        ))


@dataclass(frozen=True)
class NeuronVector:
    """One unit's incoming weights (storage order) with its bias last.

    origin records where the unit came from: (owner, layer index, unit index)
    where owner is a client id or the string "server".
    """

    values: np.ndarray
    origin: tuple = ("server", -1, -1)


def init_model(arch: ModelArch, seed, dtype=np.float64) -> ModelWeights:
    """Randomly initialize weights for an architecture.

    He-scaled normal for relu layers, Glorot-scaled for the rest; zero bias.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for p in arch.trace():
        fan_in = int(np.prod(p.incoming_shape[:-1]))
        fan_out = p.width
        if p.activation == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(0.0, std, size=p.incoming_shape).astype(dtype)
        b = np.zeros(p.width, dtype=dtype)
        layers.append(LayerWeights(w, b))
    return ModelWeights(tuple(layers))


def neuron_vector(layer: LayerWeights, unit: int,
                  origin: tuple = ("server", -1, -1)) -> NeuronVector:
    """Flatten unit `unit` of a layer into a vector (incoming then bias)."""
    if not 0 <= unit < layer.out_width:
        raise IndexError(f"unit {unit} out of range for width {layer.out_width}")
    incoming = layer.incoming[..., unit].ravel()
    values = np.concatenate([incoming, layer.bias[unit:unit + 1]])
    return NeuronVector(values=values, origin=origin)


def write_neuron(layer: LayerWeights, unit: int, values: np.ndarray) -> LayerWeights:
    """Write a flat neuron vector back into unit `unit`; returns a new layer."""
    if values.shape != (layer.fan_in + 1,):
        raise ShapeError(
            f"neuron vector length {values.shape[0]} != fan-in+1 = {layer.fan_in + 1}"
        )
    incoming = layer.incoming.copy()
    incoming[..., unit] = values[:-1].reshape(layer.incoming.shape[:-1])
    bias = layer.bias.copy()
    bias[unit] = values[-1]
    return LayerWeights(incoming, bias)


def weighted_average(models, fractions) -> ModelWeights:
    """Fraction-weighted elementwise average of shape-identical models."""
    models = list(models)
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(models) == 0:
        raise ValueError("no models to average")
    if len(fractions) != len(models):
        raise ValueError("one fraction per model required")
    if np.any(fractions < 0):
        raise ValueError("fractions must be non-negative")
    total = float(fractions.sum())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {total!r}, expected 1 within 1e-9")
    ref = models[0].layer_shapes()
    for m in models[1:]:
        shapes = m.layer_shapes()
        if shapes != ref:
            for i, (a, b) in enumerate(zip(ref, shapes)):
                if a != b:
                    raise ShapeError(f"layer {i}: shape {b} does not match {a}")
            raise ShapeError("models have different layer counts")

    # Conservation: the aggregate of identical models is that model, exactly.
    # Without this, k * (1/k) accumulation leaves rounding residue that a
    # downstream distance threshold could mistake for divergence.
    def same(a: ModelWeights, b: ModelWeights) -> bool:
        return all(np.array_equal(x.incoming, y.incoming)
                   and np.array_equal(x.bias, y.bias)
                   for x, y in zip(a.layers, b.layers))

    if all(same(m, models[0]) for m in models[1:]):
        return models[0]

    layers = []
    for i in range(len(ref)):
        inc = fractions[0] * models[0].layers[i].incoming
        bias = fractions[0] * models[0].layers[i].bias
        for f, m in zip(fractions[1:], models[1:]):
            inc = inc + f * m.layers[i].incoming
            bias = bias + f * m.layers[i].bias
        dtype = models[0].layers[i].incoming.dtype
        layers.append(LayerWeights(inc.astype(dtype, copy=False),
                                   bias.astype(dtype, copy=False)))
    return ModelWeights(tuple(layers))


def successor_rows_per_unit(model: ModelWeights, layer: int) -> int:
    """How many successor-incoming rows one unit of `layer` feeds.

    1 for dense -> dense; the pooled time length for conv -> dense (the
    flatten is channel-major so each filter owns a contiguous row block).
    Only meaningful for dense successors; conv successors grow along the
    channel axis instead.
    """
    succ = model.layers[layer + 1]
    width = model.layers[layer].out_width
    if succ.kind == CONV1D:
        return 1
    rows = succ.incoming.shape[0]
    if rows % width != 0:
        raise ShapeError(
            f"layer {layer + 1}: {rows} incoming rows not divisible by "
            f"predecessor width {width}"
        )
    return rows // width


def donor_successor_rows(model: ModelWeights, layer: int, unit: int) -> np.ndarray:
    """Extract the successor-layer weights fed by unit `unit` of `layer`.

    These are the outgoing weights copied alongside a donated neuron so the
    appended unit is functional immediately.  Dense successor: a [rows, out]
    block; conv successor: the [kernel, out] channel slice.
    """
    succ = model.layers[layer + 1]
    if succ.kind == CONV1D:
        return succ.incoming[:, unit, :].copy()
    r = successor_rows_per_unit(model, layer)
    return succ.incoming[unit * r:(unit + 1) * r, :].copy()


def append_neuron(model: ModelWeights, layer: int, source: NeuronVector,
                  successor_rows: np.ndarray) -> ModelWeights:
    """Append one unit (from `source`) at the tail of `layer`.

    The successor layer's incoming matrix gains `successor_rows` at the
    matching tail position so the widened model stays well-formed.  All
    pre-existing parameters are untouched.  The output layer can never be
    grown.
    """
    if not 0 <= layer < len(model.layers) - 1:
        raise ShapeError(
            f"cannot grow layer {layer}: the output layer is never grown"
        )
    target = model.layers[layer]
    if source.values.shape != (target.fan_in + 1,):
        raise ShapeError(
            f"source length {source.values.shape[0]} != fan-in+1 = {target.fan_in + 1}"
        )
    new_in = source.values[:-1].reshape(target.incoming.shape[:-1])
    dtype = target.incoming.dtype
    if target.kind == DENSE:
        incoming = np.concatenate(
            [target.incoming, new_in[:, None].astype(dtype)], axis=1)
    else:
        incoming = np.concatenate(
            [target.incoming, new_in[..., None].astype(dtype)], axis=2)
    bias = np.concatenate([target.bias, np.asarray([source.values[-1]], dtype=dtype)])
    grown = LayerWeights(incoming, bias)

    succ = model.layers[layer + 1]
    rows = np.asarray(successor_rows, dtype=succ.incoming.dtype)
    if succ.kind == CONV1D:
        if rows.shape != (succ.incoming.shape[0], succ.out_width):
            raise ShapeError(
                f"successor slice shape {rows.shape} != "
                f"{(succ.incoming.shape[0], succ.out_width)}"
            )
        succ_in = np.concatenate([succ.incoming, rows[:, None, :]], axis=1)
    else:
        r = successor_rows_per_unit(model, layer)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape != (r, succ.out_width):
            raise ShapeError(
                f"successor rows shape {rows.shape} != {(r, succ.out_width)}"
            )
        succ_in = np.concatenate([succ.incoming, rows], axis=0)
    new_succ = LayerWeights(succ_in, succ.bias)

    layers = list(model.layers)
    layers[layer] = grown
    layers[layer + 1] = new_succ
    return ModelWeights(tuple(layers))


def conform_to_shape(client: ModelWeights, server: ModelWeights,
                     upto_layer: int | None = None) -> ModelWeights:
    """Make a client dimension-compatible with a (possibly grown) server.

    Layers up to and including `upto_layer` are replaced by the server's;
    the next layer's incoming matrix is widened with the server's appended
    tail rows; everything above keeps the client's own weights.  When
    `upto_layer` is None it defaults to the highest layer whose width
    differs (identity when shapes already match).

    Idempotent: conforming twice with the same arguments equals once.
    """
    if len(client.layers) != len(server.layers):
        raise ShapeError("client and server have different layer counts")
    sig_c, sig_s = client.shape_signature, server.shape_signature
    if any(s < c for c, s in zip(sig_c, sig_s)):
        raise ShapeError("server layers may only be wider than the client's")
    if upto_layer is None:
        differing = [i for i, (c, s) in enumerate(zip(sig_c, sig_s)) if c != s]
        if not differing:
            return client
        upto_layer = max(differing)
    if not 0 <= upto_layer < len(client.layers) - 1:
        raise ShapeError(f"cannot conform up to layer {upto_layer}")
    if sig_c[upto_layer + 1:] != sig_s[upto_layer + 1:]:
        raise ShapeError("widths above the conformed layer must already match")

    layers = list(client.layers)
    for i in range(upto_layer + 1):
        layers[i] = server.layers[i]

    s = upto_layer + 1
    succ_c, succ_s = client.layers[s], server.layers[s]
    if succ_c.kind == CONV1D:
        have = succ_c.incoming.shape[1]
        want = succ_s.incoming.shape[1]
        if want > have:
            widened = np.concatenate(
                [succ_c.incoming, succ_s.incoming[:, have:, :]], axis=1)
            layers[s] = LayerWeights(widened, succ_c.bias)
    else:
        have = succ_c.incoming.shape[0]
        want = succ_s.incoming.shape[0]
        if want > have:
            widened = np.concatenate(
                [succ_c.incoming, succ_s.incoming[have:, :]], axis=0)
            layers[s] = LayerWeights(widened, succ_c.bias)
    return ModelWeights(tuple(layers))


def shape_lines(model: ModelWeights) -> list[str]:
    """Human-readable shape dump: one line per layer (kind, in, out)."""
    lines = []
    for layer in model.layers:
        if layer.kind == CONV1D:
            k, cin, _ = layer.incoming.shape
            lines.append(f"conv1d {k}x{cin} {layer.out_width}")
        else:
            lines.append(f"dense {layer.incoming.shape[0]} {layer.out_width}")
    return lines
