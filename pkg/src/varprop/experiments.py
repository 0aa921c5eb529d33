"""End-to-end experiments: the 1-D sine regression and the UCI-style protocol."""

from __future__ import annotations

import time

import numpy as np
from scipy import stats

from .mc import CachedSampler, moments_from_samples
from .metrics import (
    TllConfig, error_vs_uncertainty_quantile, gaussian_tll, gaussian_tll_closed, rmse, sampled_tll,
)
from .network import forward
from .numerics import derive_seed
from .propagation import propagate_network
from .report import ExperimentReport
from .training import (
    Dataset, TrainConfig, fold_input_normalization, make_sine_dataset, mlp_skeleton, normalize,
    split_dataset, train_mlp,
)

# where the single dropout layer of the sine network sits, as a dense-layer index
SINE_DROPOUT_POSITIONS = {"output": 3, "last-hidden": 2}

OOD_RANGES = ((-5.0, 0.0), (20.0, 25.0))


def _mean_rel(a, b) -> float:
    return float(np.mean(np.abs(a - b) / b))


def analytic_moments(net, xs, mode="full", relu_rule="taylor", report=None):
    means, variances = [], []
    for x in xs:
        st = propagate_network(net, x, mode, relu_rule)
        if report is not None:
            report.add_quality(st)
        means.append(st.mean)
        variances.append(st.variance)
    return np.array(means), np.array(variances)


def mc_moments(net, xs, count, seed, workers=1):
    means, variances = [], []
    for i, x in enumerate(xs):
        s = CachedSampler(net, x).samples(count, derive_seed(seed, i), workers)
        m, v = moments_from_samples(s, "diagonal")
        means.append(m)
        variances.append(v)
    return np.array(means), np.array(variances)


def sine_grids(n_in: int = 101, n_ood: int = 100):
    x_in = np.linspace(0.0, 20.0, n_in)
    half = n_ood // 2
    (a0, a1), (b0, b1) = OOD_RANGES
    # half-open ranges: [-5, 0) and (20, 25]
    left = np.linspace(a0, a1, half + 1)[:-1]
    right = np.linspace(b0, b1, n_ood - half + 1)[1:]
    return x_in, np.concatenate([left, right])


def run_sine_experiment(n_train: int = 2000, noise_sigma: float = 0.3, hidden=(100, 100, 100),
                        rate: float = 0.1, convention: str = "standard", dropout_position: str = "last-hidden",
                        epochs: int = 400, batch_size: int = 32, learning_rate: float = 0.01,
                        momentum: float = 0.9, mc_samples: int = 10_000, figure_samples: int = 100,
                        n_in: int = 101, n_ood: int = 100, n_bins: int = 5, seed: int = 0,
                        workers: int = 1) -> ExperimentReport:
    """Train on sin(x) + noise over [0, 20] and compare analytic and MC dropout std.

    Returns the report together with the trained network in ``report.result["model"]``.
    """
    if dropout_position not in SINE_DROPOUT_POSITIONS:
        raise ValueError(f"dropout_position must be one of {sorted(SINE_DROPOUT_POSITIONS)}")
    config = dict(n_train=n_train, noise_sigma=noise_sigma, hidden=list(hidden), rate=rate,
                  convention=convention, dropout_position=dropout_position, epochs=epochs,
                  batch_size=batch_size, learning_rate=learning_rate, momentum=momentum,
                  mc_samples=mc_samples, figure_samples=figure_samples, n_in=n_in, n_ood=n_ood,
                  n_bins=n_bins, seed=seed, mode="full", relu_rule="taylor")
    report = ExperimentReport("experiment sine", config=config)

    data = make_sine_dataset(n_train, 0.0, 20.0, noise_sigma, derive_seed(seed, 0))
    # z-score the input only; folded back into the first layer after training
    scaled = normalize(data)
    train_data = Dataset(scaled.inputs, data.targets)
    arch = mlp_skeleton(1, list(hidden), 1, (SINE_DROPOUT_POSITIONS[dropout_position],), rate, convention)
    cfg = TrainConfig(epochs, batch_size, learning_rate, momentum, derive_seed(seed, 1))
    t0 = time.perf_counter()
    trained = train_mlp(arch, train_data, cfg)
    report.add_timing("train", time.perf_counter() - t0, 1)
    net = fold_input_normalization(trained.net, scaled.x_mean, scaled.x_std)

    x_in, x_ood = sine_grids(n_in, n_ood)
    xs_in, xs_ood = x_in[:, None], x_ood[:, None]
    pred_in, var_in = analytic_moments(net, xs_in, report=report)
    pred_ood, var_ood = analytic_moments(net, xs_ood, report=report)
    std_in, std_ood = np.sqrt(var_in[:, 0]), np.sqrt(var_ood[:, 0])
    _, mc_var_in = mc_moments(net, xs_in, mc_samples, derive_seed(seed, 2), workers)
    _, mc_var_ood = mc_moments(net, xs_ood, mc_samples, derive_seed(seed, 3), workers)
    mc_std_in, mc_std_ood = np.sqrt(mc_var_in[:, 0]), np.sqrt(mc_var_ood[:, 0])
    _, fig_var_in = mc_moments(net, xs_in, figure_samples, derive_seed(seed, 4), workers)

    det_in = forward(net, xs_in)[:, 0]
    x_all = np.concatenate([x_in, x_ood])
    std_all = np.concatenate([std_in, std_ood])
    err_all = np.abs(np.concatenate([det_in, forward(net, xs_ood)[:, 0]]) - np.sin(x_all))
    curve = error_vs_uncertainty_quantile(std_all, err_all, n_bins)
    rho = stats.spearmanr(np.arange(n_bins), [e for _, e in curve]).statistic

    report.metrics.update(
        rmse_in_distribution=rmse(det_in, np.sin(x_in)),
        final_train_loss=trained.losses[-1],
        mean_std_in_distribution=float(std_in.mean()),
        mean_std_ood=float(std_ood.mean()),
        ood_to_in_std_ratio=float(std_ood.mean() / std_in.mean()),
        mean_rel_std_diff_in_distribution=_mean_rel(std_in, mc_std_in),
        mean_rel_std_diff_ood=_mean_rel(std_ood, mc_std_ood),
        mean_rel_std_diff_in_distribution_figure_samples=_mean_rel(std_in, np.sqrt(fig_var_in[:, 0])),
        calibration_spearman=float(rho),
    )
    report.series.update(
        train_loss=[[i + 1, v] for i, v in enumerate(trained.losses)],
        prediction=[[x, m] for x, m in zip(x_all, np.concatenate([pred_in[:, 0], pred_ood[:, 0]]))],
        analytic_std=[[x, s] for x, s in zip(x_all, std_all)],
        mc_std=[[x, s] for x, s in zip(x_all, np.concatenate([mc_std_in, mc_std_ood]))],
        mc_std_figure_samples=[[x, s] for x, s in zip(x_in, np.sqrt(fig_var_in[:, 0]))],
        error_vs_uncertainty_quantile=[list(p) for p in curve],
    )
    report.result["model"] = net
    return report


# ---------------------------------------------------------------------------
# UCI-style protocol


def _uci_arch(n_in, hidden, rate, convention):
    # dropout on the input and after the hidden layer
    return mlp_skeleton(n_in, [hidden], 1, (0, 1), rate, convention)


def _mc_samples_points(net, xs, count, seed):
    out = np.empty((count, len(xs)))
    for i, x in enumerate(xs):
        out[:, i] = CachedSampler(net, x).samples(count, derive_seed(seed, i))[:, 0]
    return out


def _evaluate(net, data: Dataset, stats_src: Dataset, taus, n_samples, seed):
    """Denormalised test metrics of both methods for each tau (normalised units)."""
    y = data.targets[:, 0] * stats_src.y_std[0] + stats_src.y_mean[0]
    ys2 = stats_src.y_std[0] ** 2
    t0 = time.perf_counter()
    mean, var = analytic_moments(net, data.inputs)
    t_an = time.perf_counter() - t0
    mean, var = stats_src.denormalize(mean[:, 0], var[:, 0])
    t0 = time.perf_counter()
    samples = _mc_samples_points(net, data.inputs, n_samples, derive_seed(seed, 0))
    t_mc = time.perf_counter() - t0
    samples = samples * stats_src.y_std[0] + stats_src.y_mean[0]
    out = {"rmse_analytic": rmse(mean, y), "rmse_mc": rmse(samples.mean(axis=0), y),
           "time_analytic": t_an, "time_mc": t_mc, "tll_analytic": {}, "tll_mc": {}, "tll_closed": {}}
    for k, tau in enumerate(taus):
        tau_orig = tau / ys2
        out["tll_analytic"][tau] = gaussian_tll(mean, var, y, TllConfig(tau_orig, n_samples), derive_seed(seed, 1, k))
        out["tll_closed"][tau] = gaussian_tll_closed(mean, var, y, tau_orig)
        out["tll_mc"][tau] = sampled_tll(samples, y, tau_orig)
    return out


def _stderr(values) -> float:
    v = np.asarray(values, float)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def run_uci_experiment(data: Dataset, n_splits: int = 20, train_fraction: float = 0.9,
                       validation_fraction: float = 0.2, hidden: int = 50,
                       rates=(0.005, 0.01, 0.05, 0.1), taus=tuple(np.logspace(-1, 2, 4)),
                       convention: str = "standard", epochs: int = 400, batch_size: int = 32,
                       learning_rate: float = 0.01, momentum: float = 0.9, n_samples: int = 10_000,
                       seed: int = 0) -> ExperimentReport:
    """Grid-searched RMSE/TLL comparison of analytic propagation and MC dropout.

    Each split holds out ``1 - train_fraction`` as test data; the training
    part is split again to pick (dropout rate, tau) per method by validation
    TLL, then the chosen rate is retrained on the full training part. ``taus``
    are precisions in normalised target units.
    """
    if data.targets.shape[1] != 1:
        raise ValueError("the UCI protocol expects a single target column")
    taus = [float(t) for t in taus]
    rates = [float(r) for r in rates]
    config = dict(n_rows=len(data), n_features=data.inputs.shape[1], n_splits=n_splits,
                  train_fraction=train_fraction, validation_fraction=validation_fraction, hidden=hidden,
                  rates=rates, taus=taus, convention=convention, epochs=epochs, batch_size=batch_size,
                  learning_rate=learning_rate, momentum=momentum, n_samples=n_samples, seed=seed,
                  mode="full", relu_rule="taylor")
    report = ExperimentReport("experiment uci", config=config)
    raw = data.raw() if data.normalized else data
    per_split = {k: [] for k in ("rmse_analytic", "rmse_mc", "tll_analytic", "tll_mc", "tll_closed",
                                 "time_analytic", "time_mc")}
    chosen = []
    for s, (train, test) in enumerate(split_dataset(raw, train_fraction, n_splits, derive_seed(seed, 0))):
        inner_train, val = split_dataset(train, 1.0 - validation_fraction, 1, derive_seed(seed, 1, s))[0]
        inner_train_n = normalize(inner_train)
        val_n = normalize(val, inner_train_n)
        best = {"analytic": (-np.inf, None), "mc": (-np.inf, None)}
        for r, rate in enumerate(rates):
            cfg = TrainConfig(epochs, batch_size, learning_rate, momentum, derive_seed(seed, 2, s, r))
            net = train_mlp(_uci_arch(data.inputs.shape[1], hidden, rate, convention), inner_train_n, cfg).net
            ev = _evaluate(net, val_n, inner_train_n, taus, n_samples, derive_seed(seed, 3, s, r))
            for method in best:
                for tau in taus:
                    score = ev[f"tll_{method}"][tau]
                    if score > best[method][0]:
                        best[method] = (score, (rate, tau))
        train_n = normalize(train)
        test_n = normalize(test, train_n)
        split_choice = {}
        nets = {}
        for method, (_, (rate, tau)) in best.items():
            split_choice[method] = {"rate": rate, "tau": tau}
            if rate not in nets:
                cfg = TrainConfig(epochs, batch_size, learning_rate, momentum,
                                  derive_seed(seed, 4, s, rates.index(rate)))
                nets[rate] = train_mlp(_uci_arch(data.inputs.shape[1], hidden, rate, convention), train_n, cfg).net
        chosen.append(split_choice)
        for method in ("analytic", "mc"):
            rate, tau = split_choice[method]["rate"], split_choice[method]["tau"]
            ev = _evaluate(nets[rate], test_n, train_n, [tau], n_samples, derive_seed(seed, 5, s))
            per_split[f"rmse_{method}"].append(ev[f"rmse_{method}"])
            per_split[f"tll_{method}"].append(ev[f"tll_{method}"][tau])
            per_split[f"time_{method}"].append(ev[f"time_{method}"])
            if method == "analytic":
                per_split["tll_closed"].append(ev["tll_closed"][tau])
    for key, values in per_split.items():
        report.metrics[f"{key}_mean"] = float(np.mean(values))
        report.metrics[f"{key}_stderr"] = _stderr(values)
        report.series[key] = [[i, v] for i, v in enumerate(values)]
    report.metrics["tll_abs_gap"] = abs(report.metrics["tll_analytic_mean"] - report.metrics["tll_mc_mean"])
    report.result["chosen_hyperparameters"] = chosen
    return report

