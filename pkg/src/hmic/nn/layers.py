"""Declarative layer descriptions, shape inference and parameter initialization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Union

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up with a layer or network."""


class SpecError(ValueError):
    """Raised for an invalid layer or network description."""


def _check_activation(name: str) -> None:
    if name not in ACTIVATIONS:
        raise SpecError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel_size: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.filters < 1:
            raise SpecError("Conv2D filters must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise SpecError("Conv2D kernel_size must be odd and >= 1")
        _check_activation(self.activation)


@dataclass(frozen=True)
class MaxPool2D:
    window: int

    def __post_init__(self):
        if self.window < 1:
            raise SpecError("MaxPool2D window must be >= 1")


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "relu"

    def __post_init__(self):
        if self.units < 1:
            raise SpecError("Dense units must be >= 1")
        _check_activation(self.activation)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise SpecError("Dropout rate must lie in [0, 1]")


@dataclass(frozen=True)
class Residual:
    inner: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "inner", tuple(self.inner))


@dataclass(frozen=True)
class LstmCell:
    units: int
    return_sequences: bool = False

    def __post_init__(self):
        if self.units < 1:
            raise SpecError("LstmCell units must be >= 1")


@dataclass(frozen=True)
class GruCell:
    units: int
    return_sequences: bool = False

    def __post_init__(self):
        if self.units < 1:
            raise SpecError("GruCell units must be >= 1")


@dataclass(frozen=True)
class SoftmaxOutput:
    classes: int

    def __post_init__(self):
        if self.classes < 1:
            raise SpecError("SoftmaxOutput classes must be >= 1")


# Decoder-side helpers for the patch autoencoder.
@dataclass(frozen=True)
class Upsample2D:
    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise SpecError("Upsample2D factor must be >= 1")


@dataclass(frozen=True)
class Reshape:
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


LayerSpec = Union[Conv2D, MaxPool2D, Dense, Flatten, Dropout, Residual, LstmCell,
                  GruCell, SoftmaxOutput, Upsample2D, Reshape]

_KINDS = {cls.__name__: cls for cls in (Conv2D, MaxPool2D, Dense, Flatten, Dropout, Residual,
                                        LstmCell, GruCell, SoftmaxOutput, Upsample2D, Reshape)}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[-1], SoftmaxOutput):
            raise SpecError("the last layer of a network must be SoftmaxOutput")
        infer_shapes(self.input_shape, self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].classes

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(l) for l in d["layers"]))


def layer_to_dict(layer) -> dict:
    kind = type(layer).__name__
    if isinstance(layer, Residual):
        return {"kind": kind, "inner": [layer_to_dict(l) for l in layer.inner]}
    d = asdict(layer)
    if isinstance(layer, Reshape):
        d["shape"] = list(layer.shape)
    return {"kind": kind, **d}


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _KINDS:
        raise SpecError(f"unknown layer kind {kind!r}")
    if kind == "Residual":
        return Residual(tuple(layer_from_dict(l) for l in d["inner"]))
    if kind == "Reshape":
        return Reshape(tuple(d["shape"]))
    return _KINDS[kind](**d)


def sequence_view(shape: tuple) -> tuple:
    """Timesteps and features seen by a recurrent layer: image rows top to bottom."""
    if len(shape) == 2:
        return shape
    if len(shape) == 3:
        return shape[0], shape[1] * shape[2]
    raise DimensionError(f"recurrent layers need a 2-D or 3-D input, got {shape}")


def output_shape(layer, shape: tuple) -> tuple:
    """Per-sample output shape of ``layer`` for a per-sample input ``shape``."""
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise DimensionError(f"Conv2D expects (H, W, C) input, got {shape}")
        return shape[0], shape[1], layer.filters
    if isinstance(layer, MaxPool2D):
        if len(shape) != 3:
            raise DimensionError(f"MaxPool2D expects (H, W, C) input, got {shape}")
        if layer.window > shape[0] or layer.window > shape[1]:
            raise DimensionError(f"pool window {layer.window} exceeds spatial size {shape[:2]}")
        return shape[0] // layer.window, shape[1] // layer.window, shape[2]
    if isinstance(layer, Upsample2D):
        if len(shape) != 3:
            raise DimensionError(f"Upsample2D expects (H, W, C) input, got {shape}")
        return shape[0] * layer.factor, shape[1] * layer.factor, shape[2]
    if isinstance(layer, (Dense, SoftmaxOutput)):
        if len(shape) != 1:
            raise DimensionError(f"{type(layer).__name__} expects a flat input, got {shape}; add Flatten")
        return (layer.units,) if isinstance(layer, Dense) else (layer.classes,)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Reshape):
        if int(np.prod(shape)) != int(np.prod(layer.shape)):
            raise DimensionError(f"cannot reshape {shape} to {layer.shape}")
        return layer.shape
    if isinstance(layer, Dropout):
        return shape
    if isinstance(layer, Residual):
        inner = infer_shapes(shape, layer.inner)[-1]
        if inner != shape:
            raise DimensionError(f"residual inner stack maps {shape} to {inner}")
        return shape
    if isinstance(layer, (LstmCell, GruCell)):
        steps, _ = sequence_view(shape)
        return (steps, layer.units) if layer.return_sequences else (layer.units,)
    raise SpecError(f"unsupported layer {layer!r}")


def infer_shapes(input_shape: tuple, layers) -> list:
    """Shapes flowing through ``layers``: element 0 is the input, element i+1 layer i's output."""
    shapes = [tuple(input_shape)]
    for layer in layers:
        shapes.append(output_shape(layer, shapes[-1]))
    return shapes


def param_shapes(layer, in_shape: tuple) -> dict:
    """Name -> shape of the trainable tensors owned directly by ``layer``."""
    if isinstance(layer, Conv2D):
        k = layer.kernel_size
        return {"kernel": (k, k, in_shape[2], layer.filters), "bias": (layer.filters,)}
    if isinstance(layer, Dense):
        return {"weight": (in_shape[0], layer.units), "bias": (layer.units,)}
    if isinstance(layer, SoftmaxOutput):
        return {"weight": (in_shape[0], layer.classes), "bias": (layer.classes,)}
    if isinstance(layer, LstmCell):
        _, d = sequence_view(in_shape)
        u = layer.units
        # gate order along the last axis: input, candidate, forget, output
        return {"W": (d + u, 4 * u), "b": (4 * u,)}
    if isinstance(layer, GruCell):
        _, d = sequence_view(in_shape)
        u = layer.units
        # gate order along the last axis: update, reset, candidate
        return {"W": (d, 3 * u), "U": (u, 3 * u), "b": (3 * u,)}
    return {}


def iter_param_shapes(input_shape: tuple, layers, prefix: str = ""):
    """Yield ``(key, shape)`` for every tensor of a layer stack, in layer order."""
    shapes = infer_shapes(input_shape, layers)
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        if isinstance(layer, Residual):
            yield from iter_param_shapes(shapes[i], layer.inner, prefix=f"{path}.")
            continue
        for name, shape in param_shapes(layer, shapes[i]).items():
            yield f"{path}.{name}", shape


def count_parameters(spec_or_shape, layers=None) -> list:
    """Trainable-parameter count per top-level layer (Keras ``summary`` style)."""
    if layers is None:
        input_shape, layers = spec_or_shape.input_shape, spec_or_shape.layers
    else:
        input_shape = spec_or_shape
    shapes = infer_shapes(input_shape, layers)
    counts = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Residual):
            counts.append(sum(int(np.prod(s)) for _, s in iter_param_shapes(shapes[i], layer.inner)))
        else:
            counts.append(sum(int(np.prod(s)) for s in param_shapes(layer, shapes[i]).values()))
    return counts


def _fans(name: str, shape: tuple) -> tuple:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        return receptive * shape[2], receptive * shape[3]
    return shape[0], shape[1]


def init_params(input_shape: tuple, layers, seed=0, dtype=np.float32) -> dict:
    """Glorot-uniform weights from a seeded generator, zero biases.

    Returns an insertion-ordered ``{key: array}`` mapping; keys look like ``"3.weight"``
    or ``"2.0.kernel"`` for tensors nested inside a residual block.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for key, shape in iter_param_shapes(tuple(input_shape), layers):
        if len(shape) == 1:
            params[key] = np.zeros(shape, dtype=dtype)
            continue
        fan_in, fan_out = _fans(key, shape)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[key] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def check_params(spec: NetworkSpec, params: dict) -> None:
    expected = dict(iter_param_shapes(spec.input_shape, spec.layers))
    if list(expected) != list(params):
        missing = set(expected) ^ set(params)
        raise SpecError(f"parameters do not match the network spec (differing keys: {sorted(missing)})")
    for key, shape in expected.items():
        if tuple(params[key].shape) != tuple(shape):
            raise SpecError(f"parameter {key} has shape {params[key].shape}, expected {shape}")
