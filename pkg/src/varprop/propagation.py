"""Analytic propagation of activation mean and covariance through a network.

The state after the first noise layer is a mean vector plus either a full
covariance matrix or a vector of variances. Affine layers transform the
covariance exactly; non-linearities are linearised at the current mean
(first-order Taylor), except that ReLU in diagonal mode may instead use the
closed-form moments of a rectified Gaussian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .network import NetworkSpec, activation, apply_layer, conv_as_matrix
from .numerics import DimensionError, as_tensor, conv2d, norm_cdf, norm_pdf

log = logging.getLogger(__name__)

MODES = ("full", "diagonal")
RELU_RULES = ("taylor", "exact-gaussian")

# clamps deeper than this are reported as a numerical-quality problem
CLAMP_WARN = 1e-9


class ConfigurationError(ValueError):
    """The network or the requested propagation settings cannot be combined."""


class UnsupportedConfigurationError(ConfigurationError):
    pass


@dataclass(frozen=True, eq=False)
class MomentState:
    """Mean and covariance of a flattened activation vector.

    ``cov`` is an n x n matrix when ``diagonal`` is false and a length-n
    variance vector otherwise. ``shape`` is the activation's natural shape
    (needed to route convolutions). ``clamps``/``max_clamp`` count negative
    variances that were reset to zero along the way.
    """

    mean: np.ndarray
    cov: np.ndarray
    diagonal: bool
    shape: tuple = ()
    clamps: int = 0
    max_clamp: float = 0.0

    def __post_init__(self):
        n = self.mean.shape[0]
        expected = (n,) if self.diagonal else (n, n)
        if self.mean.ndim != 1 or self.cov.shape != expected:
            raise DimensionError(
                f"moment state mean {self.mean.shape} incompatible with covariance {self.cov.shape}"
            )
        if not self.shape:
            object.__setattr__(self, "shape", (n,))

    @property
    def size(self) -> int:
        return self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        return self.cov if self.diagonal else np.diagonal(self.cov).copy()

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def clamp_warning(self) -> bool:
        return self.max_clamp > CLAMP_WARN

    def to_full(self) -> MomentState:
        if not self.diagonal:
            return self
        return replace(self, cov=np.diag(self.cov), diagonal=False)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Independent per-element noise Z, either added to or multiplied into X."""

    mode: str
    z_mean: np.ndarray
    z_var: np.ndarray

    def __post_init__(self):
        if self.mode not in ("additive", "multiplicative"):
            raise ValueError(f"noise mode must be additive or multiplicative, got {self.mode!r}")
        zm = as_tensor(self.z_mean).ravel()
        zv = as_tensor(self.z_var).ravel()
        if zm.shape != zv.shape:
            raise DimensionError(f"noise mean {zm.shape} and variance {zv.shape} differ in length")
        if np.any(zv < 0):
            raise ValueError("noise variance must be nonnegative")
        object.__setattr__(self, "z_mean", zm)
        object.__setattr__(self, "z_var", zv)

    @classmethod
    def from_dropout(cls, layer, n: int) -> NoiseSpec:
        return cls("multiplicative", np.full(n, layer.z_mean), np.full(n, layer.z_var))


def _check_dim(state: MomentState, n: int, what: str):
    if state.size != n:
        raise DimensionError(f"state has dimension {state.size}, {what} expects {n}")


def _clamp_diag(v: np.ndarray):
    neg = v < 0
    if not neg.any():
        return v, 0, 0.0
    depth = float(-v[neg].min())
    log.debug("clamped %d negative variances (max %.3g)", int(neg.sum()), depth)
    return np.where(neg, 0.0, v), int(neg.sum()), depth


def _finish(state: MomentState, mean, cov, shape=None) -> MomentState:
    if state.diagonal:
        cov, n, depth = _clamp_diag(cov)
    else:
        cov = 0.5 * (cov + cov.T)
        d = np.diagonal(cov)
        neg = d < 0
        n, depth = 0, 0.0
        if neg.any():
            n, depth = int(neg.sum()), float(-d[neg].min())
            log.debug("clamped %d negative diagonal entries (max %.3g)", n, depth)
            cov = cov.copy()
            idx = np.flatnonzero(neg)
            cov[idx, idx] = 0.0
    return MomentState(
        mean, cov, state.diagonal, shape if shape is not None else (mean.shape[0],),
        state.clamps + n, max(state.max_clamp, depth),
    )


# ---------------------------------------------------------------------------
# noise layers


def init_noise_moments(activation_mean, noise: NoiseSpec, shape=None) -> MomentState:
    """Moments right after the first noise layer, assuming a noise-free input."""
    a = as_tensor(activation_mean).ravel()
    if a.shape != noise.z_mean.shape:
        raise DimensionError(f"activation length {a.size} does not match noise length {noise.z_mean.size}")
    if noise.mode == "multiplicative":
        mean = noise.z_mean * a
        var = noise.z_var * np.square(a)
    else:
        mean = a + noise.z_mean
        var = noise.z_var.copy()
    return MomentState(mean, var, True, tuple(shape) if shape is not None else (a.size,))


def propagate_noise_additive(state: MomentState, noise: NoiseSpec) -> MomentState:
    if noise.mode != "additive":
        raise ValueError("expected additive noise")
    _check_dim(state, noise.z_mean.size, "noise")
    if state.diagonal:
        cov = state.cov + noise.z_var
    else:
        cov = state.cov + np.diag(noise.z_var)
    return _finish(state, state.mean + noise.z_mean, cov, state.shape)


def propagate_noise_multiplicative_full(state: MomentState, noise: NoiseSpec) -> MomentState:
    """Covariance of Z * X for independent Z (diagonal covariance) and X (full)."""
    if state.diagonal:
        raise ConfigurationError("full-covariance rule called on a diagonal state")
    if noise.mode != "multiplicative":
        raise ValueError("expected multiplicative noise")
    _check_dim(state, noise.z_mean.size, "noise")
    zm, zv, xm = noise.z_mean, noise.z_var, state.mean
    cov = state.cov * (np.diag(zv) + np.outer(zm, zm))
    cov[np.diag_indices_from(cov)] += np.square(xm) * zv
    return _finish(state, zm * xm, cov, state.shape)


def propagate_noise_multiplicative_diag(state: MomentState, noise: NoiseSpec) -> MomentState:
    if not state.diagonal:
        raise ConfigurationError("diagonal rule called on a full-covariance state")
    if noise.mode != "multiplicative":
        raise ValueError("expected multiplicative noise")
    _check_dim(state, noise.z_mean.size, "noise")
    zm, zv, xm, xv = noise.z_mean, noise.z_var, state.mean, state.cov
    var = np.square(xm) * zv + np.square(zm) * xv + xv * zv
    return _finish(state, zm * xm, var, state.shape)


# ---------------------------------------------------------------------------
# affine layers


def propagate_affine_full(state: MomentState, weights, bias) -> MomentState:
    if state.diagonal:
        raise ConfigurationError("full-covariance rule called on a diagonal state")
    w = as_tensor(weights)
    _check_dim(state, w.shape[1], "weights")
    return _finish(state, w @ state.mean + bias, w @ state.cov @ w.T)


def propagate_affine_diag(state: MomentState, weights, bias, weights_sq=None) -> MomentState:
    if not state.diagonal:
        raise ConfigurationError("diagonal rule called on a full-covariance state")
    w = as_tensor(weights)
    _check_dim(state, w.shape[1], "weights")
    w2 = np.square(w) if weights_sq is None else weights_sq
    return _finish(state, w @ state.mean + bias, w2 @ state.cov)


def propagate_conv_diag(state: MomentState, layer) -> MomentState:
    """Variance through a convolution, ignoring the covariance it creates."""
    if not state.diagonal:
        raise ConfigurationError("diagonal rule called on a full-covariance state")
    shape = state.shape
    if len(shape) != 3 or math.prod(shape) != state.size:
        raise DimensionError(f"conv2d needs an H x W x C state, got shape {shape}")
    mean = conv2d(state.mean.reshape(shape), layer.kernel, layer.padding)
    if layer.bias is not None:
        mean = mean + layer.bias
    var = conv2d(state.cov.reshape(shape), layer.kernel_sq, layer.padding)
    return _finish(state, mean.ravel(), var.ravel(), mean.shape)


# ---------------------------------------------------------------------------
# non-linearities


def activation_jacobian(kind: str, mean) -> np.ndarray:
    x = as_tensor(mean).ravel()
    if kind == "relu":
        return np.diag((x > 0).astype(float))
    if kind == "sigmoid":
        s = activation("sigmoid", x)
        return np.diag(s * (1.0 - s))
    if kind == "softmax":
        s = activation("softmax", x)
        return np.diag(s) - np.outer(s, s)
    raise ValueError(f"unknown activation {kind!r}")


def _elementwise_slope(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(float)
    s = activation("sigmoid", x)
    return s * (1.0 - s)


def propagate_activation_full(state: MomentState, kind: str) -> MomentState:
    if state.diagonal:
        raise ConfigurationError("full-covariance rule called on a diagonal state")
    mean = activation(kind, state.mean)
    if kind == "softmax":
        j = activation_jacobian(kind, state.mean)
        cov = j @ state.cov @ j.T
    else:
        # diagonal Jacobian: J S J^T == outer(d, d) * S
        d = _elementwise_slope(kind, state.mean)
        cov = np.outer(d, d) * state.cov
    return _finish(state, mean, cov, state.shape)


def relu_gaussian_moments(mu, var):
    """Mean and variance of max(0, X) for X ~ N(mu, var).

    Works element-wise on arrays; scalar inputs return a pair of floats.
    """
    scalar = np.ndim(mu) == 0 and np.ndim(var) == 0
    mu, var = np.broadcast_arrays(as_tensor(mu), as_tensor(var))
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    sigma = np.sqrt(var)
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    t = mu / safe
    cdf, pdf = norm_cdf(t), norm_pdf(t)
    m1 = mu * cdf + sigma * pdf
    m2 = (var + np.square(mu)) * cdf + mu * sigma * pdf
    mean = np.where(pos, m1, np.maximum(mu, 0.0))
    variance = np.where(pos, np.maximum(m2 - np.square(m1), 0.0), 0.0)
    if scalar:
        return float(mean), float(variance)
    return mean, variance


def propagate_activation_diag(state: MomentState, kind: str, relu_rule: str = "taylor") -> MomentState:
    if not state.diagonal:
        raise ConfigurationError("diagonal rule called on a full-covariance state")
    if kind == "softmax":
        raise UnsupportedConfigurationError(
            "softmax is not supported in diagonal mode; use full mode or stop before softmax"
        )
    if relu_rule not in RELU_RULES:
        raise ValueError(f"unknown relu rule {relu_rule!r}")
    if kind == "relu" and relu_rule == "exact-gaussian":
        mean, var = relu_gaussian_moments(state.mean, state.cov)
        return _finish(state, mean, var, state.shape)
    d = _elementwise_slope(kind, state.mean)
    return _finish(state, activation(kind, state.mean), np.square(d) * state.cov, state.shape)


# ---------------------------------------------------------------------------
# whole networks


def propagate_layer(state: MomentState, layer, mode: str, relu_rule: str = "taylor") -> MomentState:
    """Dispatch one layer to the rule for ``mode``."""
    kind = layer.kind
    full = mode == "full"
    if kind == "dropout":
        noise = NoiseSpec.from_dropout(layer, state.size)
        if full:
            return propagate_noise_multiplicative_full(state, noise)
        return propagate_noise_multiplicative_diag(state, noise)
    if kind == "dense":
        if full:
            return propagate_affine_full(state, layer.weights, layer.bias)
        return propagate_affine_diag(state, layer.weights, layer.bias, layer.weights_sq)
    if kind == "conv2d":
        if full:
            m = conv_as_matrix(layer, state.shape)
            bias = 0.0 if layer.bias is None else np.tile(layer.bias, m.shape[0] // layer.bias.size)
            out = propagate_affine_full(state, m, bias)
            return replace(out, shape=layer.output_shape(state.shape))
        return propagate_conv_diag(state, layer)
    if full:
        return propagate_activation_full(state, kind)
    return propagate_activation_diag(state, kind, relu_rule)


def _check_settings(mode: str, relu_rule: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if relu_rule not in RELU_RULES:
        raise ValueError(f"relu rule must be one of {RELU_RULES}, got {relu_rule!r}")
    if mode == "full" and relu_rule != "taylor":
        raise UnsupportedConfigurationError("the exact-gaussian relu rule is only available in diagonal mode")


def check_propagatable(net: NetworkSpec, mode: str, relu_rule: str = "taylor") -> int:
    """Validate settings and return the index of the first dropout layer."""
    _check_settings(mode, relu_rule)
    start = net.first_dropout()
    if start is None:
        raise ConfigurationError("network has no dropout layer; nothing to propagate")
    if mode == "diagonal" and any(l.kind == "softmax" for l in net.layers[start:]):
        raise UnsupportedConfigurationError(
            "softmax is not supported in diagonal mode; use full mode or stop before softmax"
        )
    return start


def prefix_activation(net: NetworkSpec, x, stop: int) -> np.ndarray:
    """Deterministic activation entering layer ``stop`` (the cacheable prefix)."""
    x = as_tensor(x)
    if x.shape != net.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match network input {net.input_shape}")
    h = x[None]
    for layer, shape in zip(net.layers[:stop], net.shapes[:stop]):
        h = apply_layer(layer, h, shape)
    return h[0]


def _propagate_diag_arrays(net: NetworkSpec, start: int, act: np.ndarray, relu_rule: str) -> MomentState:
    # Same rules as the per-layer diagonal functions, on bare arrays: this is
    # the hot path whose cost should stay close to a plain forward pass.
    layer = net.layers[start]
    mean = layer.z_mean * act
    var = layer.z_var * np.square(act)
    clamps, depth = 0, 0.0
    for layer, shape in zip(net.layers[start + 1:], net.shapes[start + 1:]):
        kind = layer.kind
        if kind == "dense":
            mean = layer.weights @ mean + layer.bias
            var = layer.weights_sq @ var
        elif kind == "relu":
            if relu_rule == "exact-gaussian":
                mean, var = relu_gaussian_moments(mean, var)
            else:
                on = mean > 0
                mean = np.where(on, mean, 0.0)
                var = np.where(on, var, 0.0)
        elif kind == "dropout":
            zm, zv = layer.z_mean, layer.z_var
            var = np.square(mean) * zv + (zm * zm) * var + var * zv
            mean = zm * mean
        elif kind == "conv2d":
            m = conv2d(mean.reshape(shape), layer.kernel, layer.padding)
            if layer.bias is not None:
                m = m + layer.bias
            mean = m.ravel()
            var = conv2d(var.reshape(shape), layer.kernel_sq, layer.padding).ravel()
        elif kind == "sigmoid":
            mean = activation("sigmoid", mean)
            var = np.square(mean * (1.0 - mean)) * var
        else:
            raise UnsupportedConfigurationError(f"{kind} is not supported in diagonal mode")
        if var.min(initial=0.0) < 0:
            var, n, d = _clamp_diag(var)
            clamps, depth = clamps + n, max(depth, d)
    return MomentState(mean, var, True, net.shapes[-1], clamps, depth)


def propagate_from(net: NetworkSpec, start: int, act, mode: str, relu_rule: str = "taylor") -> MomentState:
    """Propagate from the dropout layer at ``start`` given its cached input ``act``."""
    if mode == "diagonal":
        return _propagate_diag_arrays(net, start, np.asarray(act, dtype=float).ravel(), relu_rule)
    layer = net.layers[start]
    shape = net.shapes[start]
    act = np.asarray(act).ravel()
    state = init_noise_moments(act, NoiseSpec.from_dropout(layer, act.size), shape)
    if mode == "full":
        state = state.to_full()
    for layer in net.layers[start + 1:]:
        state = propagate_layer(state, layer, mode, relu_rule)
    return state


def propagate_network(net: NetworkSpec, x, mode: str = "full", relu_rule: str = "taylor") -> MomentState:
    """Output mean and covariance of ``net`` at input ``x`` under its dropout noise.

    Layers before the first dropout run deterministically; that dropout
    seeds a diagonal covariance and every later layer (further dropouts
    included) transforms it with the rule for ``mode``.
    """
    start = check_propagatable(net, mode, relu_rule)
    act = prefix_activation(net, x, start)
    return propagate_from(net, start, act, mode, relu_rule)
