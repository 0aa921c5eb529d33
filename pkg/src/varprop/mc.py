"""Monte-Carlo dropout: stochastic forward passes and their empirical moments.

Samples are generated in fixed-size blocks; block ``k`` always draws from
``RngStream(seed, k)``. Workers only decide who computes a block, never what
it contains, so results are bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import NetworkSpec, apply_layer
from .numerics import DimensionError, RngStream, as_tensor, derive_seed
from .propagation import MomentState, prefix_activation

BLOCK_SIZE = 4096


@dataclass(frozen=True, eq=False)
class McEstimate:
    mean: np.ndarray
    cov: np.ndarray  # n x n, or length-n variances when diagonal
    diagonal: bool
    sample_count: int
    seed: int

    @property
    def variance(self) -> np.ndarray:
        return self.cov if self.diagonal else np.diagonal(self.cov).copy()

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def _draw_mask(layer, shape, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) < layer.keep
    return keep * layer.mask_scale


def _run_suffix(net: NetworkSpec, start: int, h: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    for layer, shape in zip(net.layers[start:], net.shapes[start:]):
        mask = _draw_mask(layer, h.shape, rng) if layer.kind == "dropout" else None
        h = apply_layer(layer, h, shape, mask)
    return h


def _start(net: NetworkSpec) -> int:
    start = net.first_dropout()
    return len(net.layers) if start is None else start


def sample_forward(net: NetworkSpec, x, rng) -> np.ndarray:
    """One forward pass with fresh Bernoulli masks at every dropout layer.

    ``rng`` is an ``RngStream`` or a ``numpy.random.Generator`` (advanced in place).
    """
    if isinstance(rng, RngStream):
        rng = rng.generator()
    x = as_tensor(x)
    if x.shape != net.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match network input {net.input_shape}")
    return _run_suffix(net, 0, x[None], rng)[0]


class CachedSampler:
    """Draws MC dropout outputs for one input, reusing the deterministic prefix."""

    def __init__(self, net: NetworkSpec, x):
        self.net = net
        self.start = _start(net)
        self.prefix = prefix_activation(net, x, self.start)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """A single stochastic pass (used for per-sample timing)."""
        return _run_suffix(self.net, self.start, self.prefix[None], rng)[0].ravel()

    def block(self, n: int, rng: np.random.Generator) -> np.ndarray:
        h = np.broadcast_to(self.prefix, (n,) + self.prefix.shape)
        return _run_suffix(self.net, self.start, h, rng).reshape(n, -1)

    def samples(self, count: int, seed: int, workers: int = 1, block_size: int = BLOCK_SIZE) -> np.ndarray:
        sizes = [min(block_size, count - lo) for lo in range(0, count, block_size)]

        def run(k):
            return self.block(sizes[k], RngStream(seed, k).generator())

        if workers > 1 and len(sizes) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, range(len(sizes))))
        else:
            parts = [run(k) for k in range(len(sizes))]
        return np.concatenate(parts, axis=0)


def mc_samples(net: NetworkSpec, x, count: int, seed: int, workers: int = 1) -> np.ndarray:
    """``count`` x n_out matrix of MC dropout outputs (flattened)."""
    if count < 1:
        raise ValueError("sample count must be positive")
    return CachedSampler(net, x).samples(count, seed, workers)


def moments_from_samples(samples: np.ndarray, form: str = "full"):
    """Unbiased mean and covariance (or variances) of the rows of ``samples``.

    Rows are shifted by the first sample before averaging, so identical
    samples give a covariance of exactly zero.
    """
    t = samples.shape[0]
    if t < 2:
        raise ValueError("at least 2 samples are needed to estimate a covariance")
    ref = samples[0]
    d = samples - ref
    dm = d.mean(axis=0)
    c = d - dm
    if form == "diagonal":
        cov = np.einsum("ij,ij->j", c, c) / (t - 1)
    elif form == "full":
        cov = (c.T @ c) / (t - 1)
        cov = 0.5 * (cov + cov.T)
    else:
        raise ValueError(f"form must be full or diagonal, got {form!r}")
    return ref + dm, cov


def empirical_moments(net: NetworkSpec, x, count: int, seed: int, form: str = "full",
                      workers: int = 1) -> McEstimate:
    if count < 2:
        raise ValueError("empirical covariance needs at least 2 samples")
    mean, cov = moments_from_samples(mc_samples(net, x, count, seed, workers), form)
    return McEstimate(mean, cov, form == "diagonal", count, seed)


@dataclass(frozen=True)
class ConvergenceCurve:
    points: list  # (T, mean relative absolute variance difference)
    excluded: int  # output elements with zero analytic variance

    def slope(self) -> float:
        t, d = np.array(self.points, dtype=float).T
        return float(np.polyfit(np.log(t), np.log(d), 1)[0])


def convergence_curve(net: NetworkSpec, x, sample_counts, reference: MomentState, seed: int,
                      workers: int = 1) -> ConvergenceCurve:
    """Relative absolute difference between MC and analytic variances for each T.

    Each sample count draws from its own seed derived from ``seed``.
    """
    ref_var = reference.variance
    keep = ref_var > 0
    if not keep.any():
        raise ValueError("reference has zero variance at every output element")
    sampler = CachedSampler(net, x)
    points = []
    for i, t in enumerate(sample_counts):
        s = sampler.samples(int(t), derive_seed(seed, i), workers)
        _, var = moments_from_samples(s, "diagonal")
        rel = np.abs(var[keep] - ref_var[keep]) / ref_var[keep]
        points.append((int(t), float(rel.mean())))
    return ConvergenceCurve(points, int((~keep).sum()))
