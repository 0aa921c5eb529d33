"""Command-line interface. Every command writes one JSON report (stdout or --out).

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
files, invalid model/dataset documents, impossible configurations).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .bench import benchmark
from .experiments import SINE_DROPOUT_POSITIONS, run_sine_experiment, run_uci_experiment
from .mc import convergence_curve, empirical_moments
from .network import CONVENTIONS, Dense, NetworkSpec, read_model, write_model
from .propagation import MODES, RELU_RULES, propagate_network
from .report import ExperimentReport
from .training import (
    TrainConfig, fold_input_normalization, load_csv_dataset, make_sine_dataset,
    mlp_skeleton, train_mlp, write_losses_csv,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _ints(text: str):
    return [int(v) for v in _floats(text)]


def _load_model(path):
    try:
        return read_model(path)
    except FileNotFoundError:
        raise UsageError(f"model file not found: {path}") from None


def _read_input(args, net):
    if args.input is not None and args.input_file is not None:
        raise UsageError("give either --input or --input-file, not both")
    if args.input_file is not None:
        try:
            with open(args.input_file) as fh:
                text = fh.read()
        except FileNotFoundError:
            raise UsageError(f"input file not found: {args.input_file}") from None
        try:
            values = np.asarray(json.loads(text), dtype=float)
        except (json.JSONDecodeError, TypeError, ValueError):
            values = np.asarray(_floats(text))
    elif args.input is not None:
        values = np.asarray(args.input)
    else:
        raise UsageError("an input is required (--input or --input-file)")
    if values.size != int(np.prod(net.input_shape)):
        raise UsageError(f"input has {values.size} values, model expects shape {list(net.input_shape)}")
    return values.reshape(net.input_shape)


def _add_input_flags(p):
    p.add_argument("model", help="model file")
    p.add_argument("--input", type=_floats, help="inline input values, comma separated")
    p.add_argument("--input-file", help="JSON array or whitespace/comma separated values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="varprop", description="Sampling-free dropout uncertainty for feedforward networks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("train", help="train a dense MLP with dropout")
    common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--sine", type=int, metavar="N", help="generate N sine samples")
    src.add_argument("--csv", help="CSV dataset with a header row")
    p.add_argument("--target", action="append", help="target column (repeatable; default: last column)")
    p.add_argument("--normalize", action="store_true", help="z-normalize CSV features and targets")
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=20.0)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--hidden", type=_ints, default=[100, 100, 100], help="hidden widths, e.g. 100,100,100")
    p.add_argument("--dropout-before", type=_ints, default=[2],
                   help="dense-layer indices preceded by dropout (0 = input)")
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--convention", choices=CONVENTIONS, default="standard")
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-out", required=True, help="path for the trained model")
    p.add_argument("--loss-csv", help="also write per-epoch loss as CSV")

    p = sub.add_parser("propagate", help="analytic output mean and covariance")
    common(p)
    _add_input_flags(p)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--relu-rule", choices=RELU_RULES, default="taylor")

    p = sub.add_parser("mc", help="Monte-Carlo dropout moments")
    common(p)
    _add_input_flags(p)
    p.add_argument("--samples", "-T", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--form", choices=("full", "diagonal"), default="full")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compare", help="MC-to-analytic variance convergence")
    common(p)
    _add_input_flags(p)
    p.add_argument("--samples", type=_ints, default=[10, 100, 1000, 10000])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--relu-rule", choices=RELU_RULES, default="taylor")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("bench", help="runtime of analytic propagation vs MC dropout")
    common(p)
    _add_input_flags(p)
    p.add_argument("--samples", type=_ints, default=[1, 2, 5, 10, 20, 50, 100])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("experiment", help="end-to-end experiments")
    esub = p.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    s = esub.add_parser("sine", help="1-D sine regression with OOD inputs")
    common(s)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--noise-sigma", type=float, default=0.3)
    s.add_argument("--hidden", type=_ints, default=[100, 100, 100])
    s.add_argument("--rate", type=float, default=0.1)
    s.add_argument("--convention", choices=CONVENTIONS, default="standard")
    s.add_argument("--dropout-position", choices=sorted(SINE_DROPOUT_POSITIONS), default="last-hidden")
    s.add_argument("--epochs", type=int, default=400)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--mc-samples", type=int, default=10_000)
    s.add_argument("--figure-samples", type=int, default=100)
    s.add_argument("--bins", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--model-out", help="also save the trained model")

    u = esub.add_parser("uci", help="RMSE/TLL protocol on a regression CSV")
    common(u)
    u.add_argument("csv")
    u.add_argument("--target", help="target column (default: last column)")
    u.add_argument("--splits", type=int, default=20)
    u.add_argument("--train-fraction", type=float, default=0.9)
    u.add_argument("--validation-fraction", type=float, default=0.2)
    u.add_argument("--hidden", type=int, default=50)
    u.add_argument("--rates", type=_floats, default=[0.005, 0.01, 0.05, 0.1])
    u.add_argument("--taus", type=_floats, default=list(np.logspace(-1, 2, 4)),
                   help="observation precisions in normalized target units")
    u.add_argument("--convention", choices=CONVENTIONS, default="standard")
    u.add_argument("--epochs", type=int, default=400)
    u.add_argument("--batch-size", type=int, default=32)
    u.add_argument("--lr", type=float, default=0.01)
    u.add_argument("--momentum", type=float, default=0.9)
    u.add_argument("--samples", type=int, default=10_000)
    u.add_argument("--seed", type=int, default=0)
    return parser


def _state_result(state):
    return {"shape": list(state.shape), "mean": state.mean, "covariance_form": "diagonal" if state.diagonal else "full",
            "covariance": state.cov, "std": state.std}


def cmd_train(args) -> ExperimentReport:
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.seed)
    if args.sine is not None:
        data = make_sine_dataset(args.sine, args.lo, args.hi, args.noise_sigma, args.seed)
        source = {"sine": args.sine, "lo": args.lo, "hi": args.hi, "noise_sigma": args.noise_sigma}
    else:
        try:
            data = load_csv_dataset(args.csv, args.target, args.normalize)
        except FileNotFoundError:
            raise UsageError(f"dataset not found: {args.csv}") from None
        source = {"csv": args.csv, "target": args.target, "normalize": args.normalize}
    arch = mlp_skeleton(data.inputs.shape[1], args.hidden, data.targets.shape[1], set(args.dropout_before),
                        args.rate, args.convention)
    result = train_mlp(arch, data, cfg)
    net = result.net
    folded = False
    if data.normalized:
        # move target scaling into the last layer; inputs too unless dropout sits on them
        last = net.layers[-1]
        layers = list(net.layers)
        layers[-1] = Dense(last.weights * data.y_std[:, None], last.bias * data.y_std + data.y_mean)
        net = NetworkSpec(tuple(layers), net.input_shape)
        if 0 not in args.dropout_before:
            net = fold_input_normalization(net, data.x_mean, data.x_std)
            folded = True
    write_model(net, args.model_out)
    if args.loss_csv:
        write_losses_csv(result.losses, args.loss_csv)
    report = ExperimentReport("train", config={**source, **vars(cfg), "hidden": args.hidden,
                                                "dropout_before": args.dropout_before, "rate": args.rate,
                                                "convention": args.convention, "model_out": args.model_out})
    report.metrics["final_train_loss"] = result.losses[-1]
    report.series["train_loss"] = [[i + 1, v] for i, v in enumerate(result.losses)]
    if data.normalized and not folded:
        report.result["input_normalization"] = {"mean": data.x_mean, "std": data.x_std}
    report.result["model_out"] = args.model_out
    return report


def cmd_propagate(args) -> ExperimentReport:
    net = _load_model(args.model)
    x = _read_input(args, net)
    state = propagate_network(net, x, args.mode, args.relu_rule)
    report = ExperimentReport("propagate", config={"model": args.model, "input": x, "mode": args.mode,
                                                   "relu_rule": args.relu_rule})
    report.add_quality(state)
    report.metrics["mean_std"] = float(state.std.mean())
    report.result.update(_state_result(state))
    return report


def cmd_mc(args) -> ExperimentReport:
    net = _load_model(args.model)
    x = _read_input(args, net)
    est = empirical_moments(net, x, args.samples, args.seed, args.form, args.workers)
    report = ExperimentReport("mc", config={"model": args.model, "input": x, "samples": args.samples,
                                            "seed": args.seed, "form": args.form, "workers": args.workers})
    report.metrics["mean_std"] = float(est.std.mean())
    report.result.update({"mean": est.mean, "covariance_form": args.form, "covariance": est.cov,
                          "std": est.std, "sample_count": est.sample_count, "seed": est.seed})
    return report


def cmd_compare(args) -> ExperimentReport:
    net = _load_model(args.model)
    x = _read_input(args, net)
    ref = propagate_network(net, x, args.mode, args.relu_rule)
    curve = convergence_curve(net, x, args.samples, ref, args.seed, args.workers)
    report = ExperimentReport("compare", config={"model": args.model, "input": x, "samples": args.samples,
                                                 "seed": args.seed, "mode": args.mode,
                                                 "relu_rule": args.relu_rule})
    report.add_quality(ref)
    report.series["relative_abs_variance_difference"] = [list(p) for p in curve.points]
    if len(curve.points) >= 2:
        report.metrics["loglog_slope"] = curve.slope()
    report.metrics["final_relative_difference"] = curve.points[-1][1]
    report.result["excluded_zero_variance_outputs"] = curve.excluded
    return report


def cmd_bench(args) -> ExperimentReport:
    net = _load_model(args.model)
    x = _read_input(args, net)
    report = benchmark(net, x, args.samples, args.repeats, args.seed)
    report.config["model"] = args.model
    return report


def cmd_experiment(args) -> ExperimentReport:
    if args.experiment == "sine":
        report = run_sine_experiment(
            n_train=args.n_train, noise_sigma=args.noise_sigma, hidden=args.hidden, rate=args.rate,
            convention=args.convention, dropout_position=args.dropout_position, epochs=args.epochs,
            batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
            mc_samples=args.mc_samples, figure_samples=args.figure_samples, n_bins=args.bins,
            seed=args.seed, workers=args.workers)
        net = report.result.pop("model")
        if args.model_out:
            write_model(net, args.model_out)
            report.result["model_out"] = args.model_out
        return report
    try:
        data = load_csv_dataset(args.csv, [args.target] if args.target else None)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {args.csv}") from None
    report = run_uci_experiment(
        data, n_splits=args.splits, train_fraction=args.train_fraction,
        validation_fraction=args.validation_fraction, hidden=args.hidden, rates=args.rates, taus=args.taus,
        convention=args.convention, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        momentum=args.momentum, n_samples=args.samples, seed=args.seed)
    report.config["csv"] = args.csv
    return report


COMMANDS = {"train": cmd_train, "propagate": cmd_propagate, "mc": cmd_mc, "compare": cmd_compare,
            "bench": cmd_bench, "experiment": cmd_experiment}

# model/dataset format errors, shape mismatches and bad settings are all
# ValueError subclasses: invalid user input rather than a failure while running
_USAGE_ERRORS = (UsageError, ValueError)


def _fail(exc: Exception, code: int) -> int:
    err = {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        report = COMMANDS[args.command](args)
        text = report.to_json()
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    except _USAGE_ERRORS as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - reported as structured error
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
