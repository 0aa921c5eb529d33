"""Mini-batch SGD training for dense MLPs with dropout, plus dataset helpers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .network import Dense, Dropout, NetworkSpec, ReLU
from .numerics import RngStream, as_tensor

TRAINABLE = ("dense", "relu", "dropout")

# stream ids carved out of the training seed
_INIT, _SHUFFLE, _MASKS = 0, 1, 2


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    loss: str = "mean-squared-error"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.loss != "mean-squared-error":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # n x d
    targets: np.ndarray  # n x k
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None

    def __post_init__(self):
        x, y = as_tensor(self.inputs), as_tensor(self.targets)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DatasetError(f"inputs {x.shape} and targets {y.shape} must be 2-D with equal rows")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        for name, k in (("x_mean", x.shape[1]), ("x_std", x.shape[1]),
                        ("y_mean", y.shape[1]), ("y_std", y.shape[1])):
            v = getattr(self, name)
            if v is not None:
                v = as_tensor(v)
                if v.shape != (k,):
                    raise DatasetError(f"{name} must have length {k}")
                object.__setattr__(self, name, v)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def normalized(self) -> bool:
        return self.x_mean is not None

    def subset(self, idx) -> Dataset:
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])

    def denormalize(self, mean, var=None):
        """Map predicted target means (and variances) back to the original scale."""
        mean = as_tensor(mean)
        if self.y_mean is None:
            return mean if var is None else (mean, as_tensor(var))
        out = mean * self.y_std + self.y_mean
        if var is None:
            return out
        return out, as_tensor(var) * np.square(self.y_std)

    def raw(self) -> Dataset:
        """Undo normalization of inputs and targets."""
        if not self.normalized:
            return self
        return Dataset(self.inputs * self.x_std + self.x_mean, self.targets * self.y_std + self.y_mean)


def _safe_std(a: np.ndarray) -> np.ndarray:
    s = a.std(axis=0)
    return np.where(s > 0, s, 1.0)


def normalize(data: Dataset, stats: Dataset | None = None) -> Dataset:
    """Z-normalize ``data`` with statistics of ``stats`` (default: its own)."""
    if data.normalized:
        raise DatasetError("dataset is already normalized")
    if stats is None:
        xm, xs = data.inputs.mean(axis=0), _safe_std(data.inputs)
        ym, ys = data.targets.mean(axis=0), _safe_std(data.targets)
    else:
        xm, xs, ym, ys = stats.x_mean, stats.x_std, stats.y_mean, stats.y_std
    return Dataset((data.inputs - xm) / xs, (data.targets - ym) / ys, xm, xs, ym, ys)


def make_sine_dataset(n: int, lo: float = 0.0, hi: float = 20.0, noise_sigma: float = 0.3,
                      seed: int = 0) -> Dataset:
    """Inputs uniform on [lo, hi], targets sin(x) plus Gaussian noise."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rng = RngStream(seed).generator()
    x = rng.uniform(lo, hi, size=(n, 1))
    y = np.sin(x)
    if noise_sigma > 0:
        y = y + rng.normal(0.0, noise_sigma, size=(n, 1))
    return Dataset(x, y)


def load_csv_dataset(path, target_columns=None, normalize_data: bool = False) -> Dataset:
    """Read a numeric CSV with a header row.

    ``target_columns`` names the target columns (default: the last column);
    all remaining columns are features.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_columns is None:
        target_columns = [header[-1]]
    for name in target_columns:
        if name not in header:
            raise DatasetError(f"{path}: unknown target column {name!r} (columns: {header})")
    values = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: row {r}, column {c + 1} ({header[c]!r}): "
                                   f"non-numeric value {cell!r}") from None
    if values.shape[0] == 0:
        raise DatasetError(f"{path}: no data rows")
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"{path}: non-finite values")
    t_idx = [header.index(n) for n in target_columns]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    if not f_idx:
        raise DatasetError(f"{path}: no feature columns left")
    data = Dataset(values[:, f_idx], values[:, t_idx])
    return normalize(data) if normalize_data else data


def split_dataset(data: Dataset, train_fraction: float, n_splits: int, seed: int):
    """``n_splits`` random (train, validation) partitions, one RNG stream per split."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(data)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty partition for n={n}")
    splits = []
    for i in range(n_splits):
        perm = RngStream(seed, i).generator().permutation(n)
        splits.append((data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))))
    return splits


# ---------------------------------------------------------------------------
# architecture and gradients


def mlp_skeleton(n_in: int, hidden, n_out: int, dropout_before=(), rate: float = 0.1,
                 convention: str = "standard") -> NetworkSpec:
    """Dense/ReLU stack with dropout inserted before the dense layers listed.

    ``dropout_before`` holds dense-layer indices (0 = first dense layer, which
    means dropout on the input). Weights are zero placeholders.
    """
    sizes = [n_in, *hidden, n_out]
    layers = []
    for i in range(len(sizes) - 1):
        if i in dropout_before:
            layers.append(Dropout(rate, convention))
        layers.append(Dense(np.zeros((sizes[i + 1], sizes[i])), np.zeros(sizes[i + 1])))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return NetworkSpec(tuple(layers), (n_in,))


def init_params(net: NetworkSpec, seed: int):
    rng = RngStream(seed, _INIT).generator()
    params = []
    for layer in net.layers:
        if layer.kind == "dense":
            out, fan_in = layer.weights.shape
            bound = 1.0 / math.sqrt(fan_in)
            params.append([rng.uniform(-bound, bound, (out, fan_in)), rng.uniform(-bound, bound, out)])
    return params


def draw_masks(net: NetworkSpec, batch: int, rng: np.random.Generator):
    masks = []
    for layer, shape in zip(net.layers, net.shapes):
        if layer.kind == "dropout":
            keep = rng.random((batch,) + tuple(shape)) < layer.keep
            masks.append(keep * layer.mask_scale)
    return masks


def loss_and_grads(net: NetworkSpec, params, x, y, masks):
    """MSE loss and its gradients w.r.t. every (weights, bias) pair.

    ``masks`` are the scaled dropout masks, one per dropout layer, shaped like
    the batch activations.
    """
    acts = []
    h = x
    di = 0
    pi = 0
    for layer in net.layers:
        acts.append(h)
        if layer.kind == "dense":
            w, b = params[pi]
            h = h @ w.T + b
            pi += 1
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        elif layer.kind == "dropout":
            h = h * masks[di]
            di += 1
    resid = h - y
    loss = float(np.mean(np.square(resid)))
    g = 2.0 * resid / resid.size
    grads = [None] * len(params)
    for layer, a in zip(reversed(net.layers), reversed(acts)):
        if layer.kind == "dense":
            pi -= 1
            w = params[pi][0]
            grads[pi] = [g.T @ a, g.sum(axis=0)]
            g = g @ w
        elif layer.kind == "relu":
            g = g * (a > 0)
        elif layer.kind == "dropout":
            di -= 1
            g = g * masks[di]
    return loss, grads


def _with_params(net: NetworkSpec, params) -> NetworkSpec:
    it = iter(params)
    layers = []
    for layer in net.layers:
        if layer.kind == "dense":
            w, b = next(it)
            layer = Dense(w.copy(), b.copy())
        layers.append(layer)
    return NetworkSpec(tuple(layers), net.input_shape)


@dataclass(frozen=True, eq=False)
class TrainResult:
    net: NetworkSpec
    losses: list  # mean training loss per epoch


def train_mlp(arch: NetworkSpec, data: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fit the dense layers of ``arch`` with dropout active at train time.

    Only the layer structure of ``arch`` is used; weights are re-initialised
    from ``cfg.seed``.
    """
    for i, layer in enumerate(arch.layers):
        if layer.kind not in TRAINABLE:
            raise ValueError(f"layer {i}: {layer.kind} layers cannot be trained")
    if not arch.layers or arch.layers[-1].kind != "dense":
        raise ValueError("the final layer must be dense")
    if arch.input_shape != (data.inputs.shape[1],) or arch.output_shape != (data.targets.shape[1],):
        raise ValueError(
            f"architecture maps {arch.input_shape} -> {arch.output_shape}, data is "
            f"{data.inputs.shape[1]} -> {data.targets.shape[1]}"
        )
    params = init_params(arch, cfg.seed)
    velocity = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
    shuffle_rng = RngStream(cfg.seed, _SHUFFLE).generator()
    mask_rng = RngStream(cfg.seed, _MASKS).generator()
    n = len(data)
    losses = []
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = data.inputs[idx], data.targets[idx]
            masks = draw_masks(arch, len(idx), mask_rng)
            loss, grads = loss_and_grads(arch, params, xb, yb, masks)
            total += loss * len(idx)
            for p, v, g in zip(params, velocity, grads):
                for k in range(2):
                    v[k] *= cfg.momentum
                    v[k] -= cfg.learning_rate * g[k]
                    p[k] += v[k]
        losses.append(total / n)
    return TrainResult(_with_params(arch, params), losses)


def fold_input_normalization(net: NetworkSpec, x_mean, x_std) -> NetworkSpec:
    """Rewrite the first dense layer so ``net`` accepts raw instead of z-scored inputs.

    Only valid when no dropout precedes the first dense layer.
    """
    layers = list(net.layers)
    for i, layer in enumerate(layers):
        if layer.kind == "dropout":
            raise ValueError("cannot fold normalization through a leading dropout layer")
        if layer.kind == "dense":
            w = layer.weights / x_std
            layers[i] = Dense(w, layer.bias - w @ x_mean)
            return NetworkSpec(tuple(layers), net.input_shape)
    raise ValueError("network has no dense layer")


def write_losses_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])
