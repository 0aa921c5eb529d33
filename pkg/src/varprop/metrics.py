"""Regression quality metrics for predictive means and uncertainties."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .numerics import RngStream, as_tensor

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TllConfig:
    tau: float = 1.0  # precision of the Gaussian observation noise
    n_samples: int = 10_000

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


def rmse(predictions, targets) -> float:
    p, t = as_tensor(predictions).ravel(), as_tensor(targets).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean(np.square(p - t))))


def sampled_tll(samples, targets, tau: float) -> float:
    """Average over points of log mean_t N(y; sample_t, 1/tau).

    ``samples`` is T x n: T predictive draws for each of n points.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    s = as_tensor(samples)
    y = as_tensor(targets).ravel()
    if s.ndim != 2 or s.shape[1] != y.size:
        raise ValueError(f"samples {s.shape} do not match {y.size} targets")
    log_lik = -0.5 * tau * np.square(y - s) - 0.5 * _LOG_2PI + 0.5 * math.log(tau)
    per_point = logsumexp(log_lik, axis=0) - math.log(s.shape[0])
    return float(per_point.mean())


def gaussian_tll_closed(pred_mean, pred_var, targets, tau: float) -> float:
    """Mean of log N(y; mean, var + 1/tau)."""
    m, v, y = (as_tensor(a).ravel() for a in (pred_mean, pred_var, targets))
    if np.any(v < 0):
        raise ValueError("predictive variance must be nonnegative")
    if not tau > 0:
        raise ValueError("tau must be positive")
    total = v + 1.0 / tau
    return float(np.mean(-0.5 * (_LOG_2PI + np.log(total)) - 0.5 * np.square(y - m) / total))


def gaussian_tll(pred_mean, pred_var, targets, cfg: TllConfig, seed: int) -> float:
    """Sampled test log-likelihood of a Gaussian predictive distribution.

    Draws ``cfg.n_samples`` predictions per point from N(mean, var) and
    scores them like MC dropout samples.
    """
    m, v, y = (as_tensor(a).ravel() for a in (pred_mean, pred_var, targets))
    if not (m.shape == v.shape == y.shape):
        raise ValueError("pred_mean, pred_var and targets must have equal length")
    if np.any(v < 0):
        raise ValueError("predictive variance must be nonnegative")
    rng = RngStream(seed).generator()
    draws = m + np.sqrt(v) * rng.standard_normal((cfg.n_samples, m.size))
    return sampled_tll(draws, y, cfg.tau)


def error_vs_uncertainty_quantile(uncertainty, errors, n_bins: int = 10):
    """Mean error in each uncertainty-quantile bin, lowest uncertainty first.

    Returns a list of (bin upper quantile, mean error) pairs.
    """
    u, e = as_tensor(uncertainty).ravel(), as_tensor(errors).ravel()
    if u.shape != e.shape:
        raise ValueError("uncertainty and errors must have equal length")
    if n_bins < 1 or n_bins > u.size:
        raise ValueError(f"n_bins must lie in [1, {u.size}], got {n_bins}")
    order = np.argsort(u, kind="stable")
    bins = np.array_split(e[order], n_bins)
    return [((i + 1) / n_bins, float(b.mean())) for i, b in enumerate(bins)]
