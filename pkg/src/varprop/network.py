"""Layer and network descriptions, deterministic inference and the model file format.

A model file is a JSON document::

    {"input_shape": [1], "layers": [
      {"kind": "dense", "weights": [[...], ...], "bias": [...]},
      {"kind": "relu"},
      {"kind": "dropout", "rate": 0.1, "convention": "standard"},
      ...
    ]}

``save_model`` writes a canonical form (fixed key order, one layer per line,
shortest round-trip float repr) so repeated saves are byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np
from scipy import special

from .numerics import DimensionError, as_tensor, conv2d, conv_output_shape

CONVENTIONS = ("standard", "inverted")
PADDINGS = ("valid", "same")


class ModelFormatError(ValueError):
    """Malformed model document or inconsistent network description."""

    def __init__(self, message: str, layer_index: int | None = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Dense:
    weights: np.ndarray  # out x in
    bias: np.ndarray
    kind = "dense"

    def __post_init__(self):
        w = as_tensor(self.weights)
        b = as_tensor(self.bias)
        if w.ndim != 2:
            raise DimensionError(f"dense weights must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"dense bias shape {b.shape} does not match weights {w.shape}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @cached_property
    def weights_sq(self) -> np.ndarray:
        return np.square(self.weights)

    def output_shape(self, shape):
        n_in = math.prod(shape)
        if n_in != self.weights.shape[1]:
            raise DimensionError(
                f"dense expects {self.weights.shape[1]} inputs, got shape {tuple(shape)}"
            )
        return (self.weights.shape[0],)


@dataclass(frozen=True, eq=False)
class Conv2D:
    kernel: np.ndarray  # kh x kw x C x C_out
    padding: str
    bias: np.ndarray | None = None
    kind = "conv2d"

    def __post_init__(self):
        k = as_tensor(self.kernel)
        if k.ndim != 4:
            raise DimensionError(f"conv2d kernel must be 4-D, got shape {k.shape}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)
        if self.bias is not None:
            b = as_tensor(self.bias)
            if b.shape != (k.shape[3],):
                raise DimensionError(f"conv2d bias shape {b.shape} does not match kernel {k.shape}")
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)

    @cached_property
    def kernel_sq(self) -> np.ndarray:
        return np.square(self.kernel)

    def output_shape(self, shape):
        return conv_output_shape(shape, self.kernel.shape, self.padding)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Sigmoid:
    kind = "sigmoid"

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Dropout:
    rate: float
    convention: str
    kind = "dropout"

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"dropout convention must be one of {CONVENTIONS}, got {self.convention!r}")

    @property
    def keep(self) -> float:
        return 1.0 - self.rate

    @property
    def mask_scale(self) -> float:
        """Value a kept unit is multiplied by."""
        return 1.0 if self.convention == "standard" else 1.0 / self.keep

    @property
    def z_mean(self) -> float:
        return self.keep if self.convention == "standard" else 1.0

    @property
    def z_var(self) -> float:
        p = self.rate
        return p * (1.0 - p) if self.convention == "standard" else p / (1.0 - p)

    def output_shape(self, shape):
        return tuple(shape)


LayerSpec = Union[Dense, Conv2D, ReLU, Sigmoid, Softmax, Dropout]
ACTIVATIONS = ("relu", "sigmoid", "softmax")


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if any(s < 0 for s in self.input_shape):
            raise ModelFormatError("input_shape extents must be nonnegative")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ModelFormatError("softmax must be the final layer", i)
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except DimensionError as exc:
                raise ModelFormatError(str(exc), i) from None
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self):
        return self.shapes[-1]

    def first_dropout(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if layer.kind == "dropout":
                return i
        return None


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activation(kind: str, x):
    x = as_tensor(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return special.expit(x)
    if kind == "softmax":
        return _softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def apply_layer(layer, x: np.ndarray, in_shape, mask=None) -> np.ndarray:
    """Apply ``layer`` to a batch ``x`` of shape (B, *in_shape).

    Dropout layers use ``mask`` (already scaled, shape of ``x``) when given,
    otherwise the test-time expectation E[Z].
    """
    kind = layer.kind
    if kind == "dense":
        flat = x.reshape(x.shape[0], -1)
        return flat @ layer.weights.T + layer.bias
    if kind == "conv2d":
        out = conv2d(x.reshape((x.shape[0],) + tuple(in_shape)), layer.kernel, layer.padding)
        if layer.bias is not None:
            out = out + layer.bias
        return out
    if kind == "dropout":
        if mask is None:
            return x * layer.z_mean
        return x * mask
    if kind == "softmax":
        flat = x.reshape(x.shape[0], -1)
        return _softmax(flat).reshape(x.shape)
    return activation(kind, x)


def _as_batch(net: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    shape = net.input_shape
    if x.shape == shape:
        return x[None], False
    if x.shape[1:] == shape:
        return x, True
    raise DimensionError(f"input shape {x.shape} does not match network input {shape}")


def forward(net: NetworkSpec, x) -> np.ndarray:
    """Deterministic inference; dropout scales activations by E[Z].

    ``x`` is a single input of ``net.input_shape`` or a batch with one extra
    leading axis.
    """
    h, batched = _as_batch(net, x)
    for layer, shape in zip(net.layers, net.shapes):
        h = apply_layer(layer, h, shape)
    return h if batched else h[0]


def conv_as_matrix(layer: Conv2D, input_shape) -> np.ndarray:
    """Dense matrix M with M @ x.ravel() == conv2d(x).ravel() (row-major H, W, C)."""
    if layer.kind != "conv2d":
        raise ValueError(f"expected a conv2d layer, got {layer.kind}")
    h, w, c = input_shape
    ho, wo, c_out = conv_output_shape(input_shape, layer.kernel.shape, layer.padding)
    kh, kw = layer.kernel.shape[:2]
    top = (kh - 1) // 2 if layer.padding == "same" else 0
    left = (kw - 1) // 2 if layer.padding == "same" else 0
    m = np.zeros((ho * wo * c_out, h * w * c))
    for i in range(ho):
        for j in range(wo):
            for d in range(c_out):
                row = (i * wo + j) * c_out + d
                for a in range(kh):
                    r = i + a - top
                    if not 0 <= r < h:
                        continue
                    for b in range(kw):
                        s = j + b - left
                        if not 0 <= s < w:
                            continue
                        for ch in range(c):
                            m[row, (r * w + s) * c + ch] += layer.kernel[a, b, ch, d]
    return m


# ---------------------------------------------------------------------------
# serialization


def _check_numeric(value, ndim: int, what: str, index: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{what} must be a rectangular numeric array", index) from None
    if arr.ndim != ndim:
        raise ModelFormatError(f"{what} must be {ndim}-D, got {arr.ndim}-D", index)
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{what} contains non-finite values", index)
    return arr


_LAYER_FIELDS = {
    "dense": ("weights", "bias"),
    "conv2d": ("kernel", "padding"),
    "relu": (),
    "sigmoid": (),
    "softmax": (),
    "dropout": ("rate", "convention"),
}
_OPTIONAL_FIELDS = {"conv2d": ("bias",)}


def _layer_from_dict(d, i: int):
    if not isinstance(d, dict):
        raise ModelFormatError("layer must be an object", i)
    kind = d.get("kind")
    if kind not in _LAYER_FIELDS:
        raise ModelFormatError(f"unknown layer kind {kind!r}", i)
    required = _LAYER_FIELDS[kind]
    allowed = {"kind", *required, *_OPTIONAL_FIELDS.get(kind, ())}
    missing = [k for k in required if k not in d]
    if missing:
        raise ModelFormatError(f"{kind} layer missing field(s) {missing}", i)
    extra = sorted(set(d) - allowed)
    if extra:
        raise ModelFormatError(f"{kind} layer has unknown field(s) {extra}", i)
    try:
        if kind == "dense":
            return Dense(_check_numeric(d["weights"], 2, "weights", i),
                         _check_numeric(d["bias"], 1, "bias", i))
        if kind == "conv2d":
            bias = d.get("bias")
            return Conv2D(_check_numeric(d["kernel"], 4, "kernel", i), d["padding"],
                          None if bias is None else _check_numeric(bias, 1, "bias", i))
        if kind == "dropout":
            rate = d["rate"]
            if isinstance(rate, bool) or not isinstance(rate, (int, float)):
                raise ModelFormatError("dropout rate must be a number", i)
            return Dropout(float(rate), d["convention"])
        return {"relu": ReLU, "sigmoid": Sigmoid, "softmax": Softmax}[kind]()
    except ModelFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(str(exc), i) from None


def model_from_dict(doc) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be an object")
    extra = sorted(set(doc) - {"input_shape", "layers"})
    if extra:
        raise ModelFormatError(f"unknown top-level field(s) {extra}")
    shape = doc.get("input_shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in shape):
        raise ModelFormatError("input_shape must be a list of integers")
    layers = doc.get("layers")
    if not isinstance(layers, list):
        raise ModelFormatError("layers must be a list")
    return NetworkSpec(tuple(_layer_from_dict(d, i) for i, d in enumerate(layers)), tuple(shape))


def load_model(data: bytes | str) -> NetworkSpec:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not a valid JSON document: {exc}") from None
    return model_from_dict(doc)


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    if layer.kind == "dense":
        d["weights"] = layer.weights.tolist()
        d["bias"] = layer.bias.tolist()
    elif layer.kind == "conv2d":
        d["kernel"] = layer.kernel.tolist()
        if layer.bias is not None:
            d["bias"] = layer.bias.tolist()
        d["padding"] = layer.padding
    elif layer.kind == "dropout":
        d["rate"] = float(layer.rate)
        d["convention"] = layer.convention
    return d


def model_to_dict(net: NetworkSpec) -> dict:
    return {"input_shape": list(net.input_shape), "layers": [layer_to_dict(l) for l in net.layers]}


def save_model(net: NetworkSpec) -> bytes:
    # json emits floats via repr: shortest string that round-trips bit-exactly
    lines = [json.dumps(layer_to_dict(l), allow_nan=False) for l in net.layers]
    body = ",\n  ".join(lines)
    text = '{"input_shape": %s, "layers": [\n  %s\n]}\n' % (json.dumps(list(net.input_shape)), body)
    if not lines:
        text = '{"input_shape": %s, "layers": []}\n' % json.dumps(list(net.input_shape))
    return text.encode("utf-8")


def read_model(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return load_model(fh.read())


def write_model(net: NetworkSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(net))
