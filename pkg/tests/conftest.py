from dataclasses import replace

import numpy as np
import pytest

from varprop.network import Conv2D, Dense, Dropout, NetworkSpec, ReLU, Sigmoid
from varprop.propagation import (
    init_noise_moments, NoiseSpec, prefix_activation, propagate_layer,
)


def random_dense_net(rng, max_layers=4, max_units=8, activations=("relu", "sigmoid"),
                     convention=None, n_in=None):
    """Random dense stack with at least one dropout; layer count <= max_layers dense layers."""
    n_dense = int(rng.integers(1, max_layers + 1))
    sizes = [n_in or int(rng.integers(1, max_units + 1))]
    sizes += [int(rng.integers(1, max_units + 1)) for _ in range(n_dense)]
    drop_at = set(rng.choice(n_dense, size=int(rng.integers(1, n_dense + 1)), replace=False).tolist())
    layers = []
    for i in range(n_dense):
        if i in drop_at:
            conv = convention or str(rng.choice(["standard", "inverted"]))
            layers.append(Dropout(float(rng.uniform(0.05, 0.6)), conv))
        layers.append(Dense(rng.normal(size=(sizes[i + 1], sizes[i])), rng.normal(size=sizes[i + 1])))
        if i < n_dense - 1:
            kind = str(rng.choice(list(activations)))
            layers.append(ReLU() if kind == "relu" else Sigmoid())
    return NetworkSpec(tuple(layers), (sizes[0],))


def random_conv_net(rng, max_side=6):
    h = int(rng.integers(3, max_side + 1))
    w = int(rng.integers(3, max_side + 1))
    c = int(rng.integers(1, 3))
    layers = [Dropout(float(rng.uniform(0.1, 0.5)), "standard")]
    shape = (h, w, c)
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 3))
        padding = str(rng.choice(["valid", "same"]))
        if padding == "valid" and (k > shape[0] or k > shape[1]):
            padding = "same"
        bias = rng.normal(size=c_out) if rng.random() < 0.5 else None
        layer = Conv2D(rng.normal(size=(k, k, shape[2], c_out)), padding, bias)
        layers.append(layer)
        shape = layer.output_shape(shape)
        layers.append(ReLU())
    return NetworkSpec(tuple(layers), (h, w, c))


def zeroing_oracle(net, x):
    """Full-mode propagation that discards off-diagonal covariance after every layer."""
    start = net.first_dropout()
    act = prefix_activation(net, x, start)
    layer = net.layers[start]
    state = init_noise_moments(act, NoiseSpec.from_dropout(layer, act.size), net.shapes[start]).to_full()
    for layer in net.layers[start + 1:]:
        state = propagate_layer(state, layer, "full")
        state = replace(state, cov=np.diag(np.diag(state.cov)))
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sine_model():
    """Sine regressor with the default experiment architecture (trained once per session)."""
    from varprop.experiments import run_sine_experiment

    report = run_sine_experiment(mc_samples=100, figure_samples=10, n_in=11, n_ood=10, seed=0)
    return report.result["model"]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
