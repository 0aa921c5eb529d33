"""Wall-clock comparison of analytic propagation against MC dropout."""

from __future__ import annotations

import statistics
import time

import numpy as np

from .mc import CachedSampler
from .network import NetworkSpec, apply_layer
from .numerics import RngStream
from .propagation import UnsupportedConfigurationError, check_propagatable, propagate_from
from .report import ExperimentReport


def time_call(fn, repeats: int = 5, min_time: float = 2e-3) -> float:
    """Median seconds per call of ``fn``.

    One untimed warm-up call, then the inner loop count is grown until one
    repeat lasts ``min_time``; the median over ``repeats`` is returned.
    """
    fn()
    number = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        if time.perf_counter() - t0 >= min_time or number >= 1 << 20:
            break
        number *= 2
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        samples.append((time.perf_counter() - t0) / number)
    return statistics.median(samples)


def linear_fit(x, y):
    """Least-squares line through (x, y): (slope, intercept, r_squared)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum(np.square(y - y.mean())))
    r2 = 1.0 - float(np.sum(np.square(resid))) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def benchmark(net: NetworkSpec, x, sample_counts=(1, 2, 5, 10, 20, 50, 100), repeats: int = 5,
              seed: int = 0) -> ExperimentReport:
    """Time analytic propagation (diagonal and full) and MC dropout for each T.

    Everything before the first dropout layer is computed once and shared by
    all methods, so only the noisy suffix is timed.
    """
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    start = check_propagatable(net, "full")
    sampler = CachedSampler(net, x)
    act = sampler.prefix
    report = ExperimentReport("bench", config={"sample_counts": list(sample_counts),
                                               "repeats": repeats, "seed": seed})

    suffix = list(zip(net.layers[start:], net.shapes[start:]))

    def cached_forward():
        h = act[None]
        for layer, shape in suffix:
            h = apply_layer(layer, h, shape)
        return h

    t_fwd = time_call(cached_forward, repeats)
    report.add_timing("cached_forward", t_fwd, repeats)

    t_full = time_call(lambda: propagate_from(net, start, act, "full"), repeats)
    report.add_timing("analytic_full", t_full, repeats)
    report.metrics["full_over_forward"] = t_full / t_fwd

    try:
        check_propagatable(net, "diagonal")
    except UnsupportedConfigurationError:
        t_diag = None
    else:
        t_diag = time_call(lambda: propagate_from(net, start, act, "diagonal"), repeats)
        report.add_timing("analytic_diagonal", t_diag, repeats)
        report.metrics["diagonal_over_forward"] = t_diag / t_fwd

    mc_times = []
    for t in sample_counts:
        def run(t=int(t)):
            rng = RngStream(seed).generator()
            for _ in range(t):
                sampler.sample(rng)
        mc_times.append(time_call(run, repeats))
        report.add_timing(f"mc_T{t}", mc_times[-1], repeats)

    slope, intercept, r2 = linear_fit(sample_counts, mc_times)
    report.metrics.update(mc_slope_s=slope, mc_intercept_s=intercept, mc_r2=r2)
    # analytic cost does not depend on T: one measurement, reported flat
    report.series["mc"] = [[int(t), s] for t, s in zip(sample_counts, mc_times)]
    report.series["analytic_full"] = [[int(t), t_full] for t in sample_counts]
    if t_diag is not None:
        report.series["analytic_diagonal"] = [[int(t), t_diag] for t in sample_counts]
        crossover = t_diag / slope if slope > 0 else float("inf")
        if np.isfinite(crossover):
            report.metrics["diagonal_breakeven_samples"] = crossover
    return report
