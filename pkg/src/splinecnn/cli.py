"""Command-line interface.

Subcommands: train, eval, gradcheck, flops, inspect-positions.  Flags mirror
TrainConfig in kebab-case; ``--config file.json`` supplies the same keys
(kebab- or snake-case) with explicit flags taking precedence.  Exit codes:
0 ok, 1 usage error, 2 ingest error, 3 numeric failure.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import tensor as T
from .costs import count_flops, count_params
from .data import IngestError, load_mnist_dir, load_mnist_idx
from .models import build_spline_lenet
from .train import NumericError, TrainConfig, evaluate, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INGEST = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _add_config_flags(p):
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("int", int):
            p.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, default=None)
    p.add_argument("--config", default=None, help="JSON file with TrainConfig keys")


def _resolve_config(args):
    values = {}
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
        for key, val in raw.items():
            values[key.replace("-", "_")] = val
    for f in dataclasses.fields(TrainConfig):
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            values[f.name] = flag_val
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _add_data_flags(p, test=True):
    p.add_argument("--data-dir", default=os.environ.get("SPLINECNN_MNIST_DIR"),
                   help="directory with the four MNIST IDX files")
    p.add_argument("--images", default=None, help="IDX images file (overrides --data-dir)")
    p.add_argument("--labels", default=None, help="IDX labels file")
    if test:
        p.add_argument("--test-images", default=None)
        p.add_argument("--test-labels", default=None)


def _load_split(args, split):
    if split == "train" and args.images:
        if not args.labels:
            raise UsageError("--images requires --labels")
        return load_mnist_idx(args.images, args.labels, split=split)
    if split == "test" and getattr(args, "test_images", None):
        return load_mnist_idx(args.test_images, args.test_labels, split=split)
    if args.data_dir:
        return load_mnist_dir(args.data_dir, split=split)
    if split == "test":
        return None
    raise UsageError("no dataset given: pass --data-dir or --images/--labels")


def _cmd_train(args):
    cfg = _resolve_config(args)
    dataset = _load_split(args, "train")
    test = _load_split(args, "test")
    path = train(cfg.build_model(), dataset, cfg, args.out, test_dataset=test)
    print(f"checkpoint written to {path}")
    return EXIT_OK


def _cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_split(args, args.split)
    result = evaluate(model, dataset, single_sample=args.single_sample)
    payload = {"accuracy": result.accuracy, "entropies": result.entropies}
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def _cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    model = build_spline_lenet(2, num_knots=3, model="hierarchical", decision="dot",
                               rank=3, rng=rng, dtype=np.float64)
    x = rng.random((3, 28, 28, 1))
    y = np.array([0, 1, 2])
    params = model.parameters()
    logits, _ = model.forward(T.DTensor(x))
    loss = T.softmax_cross_entropy(logits, y)
    T.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params]
    loss_val = abs(float(loss.values))

    def probe_err(p, g, idx):
        # Retry with a smaller step when the first interval straddles a
        # relu/max-pool kink.  Differences below the round-off resolution of
        # central differences (~machine eps * |loss| / step) are counted as
        # zero: finite differences cannot measure gradients that small.
        err = np.inf
        for eps in (1e-6, 1e-7):
            orig = p.values[idx]
            p.values[idx] = orig + eps
            lp = float(T.softmax_cross_entropy(model.forward(T.DTensor(x))[0], y).values)
            p.values[idx] = orig - eps
            lm = float(T.softmax_cross_entropy(model.forward(T.DTensor(x))[0], y).values)
            p.values[idx] = orig
            fd = (lp - lm) / (2 * eps)
            noise = 16.0 * np.finfo(np.float64).eps * loss_val / eps
            if abs(fd - g[idx]) <= noise:
                return 0.0
            err = min(err, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
        return err

    worst = 0.0
    for p, g in zip(params, grads):
        for _ in range(args.probes):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            worst = max(worst, probe_err(p, g, idx))
    print(f"max relative gradient error over {args.probes} probes/parameter: {worst:.2e}")
    if worst > 1e-4:
        print("gradient check FAILED (tolerance 1e-4)")
        return EXIT_NUMERIC
    print("gradient check passed (tolerance 1e-4)")
    return EXIT_OK


def _cmd_flops(args):
    cfg = _resolve_config(args)
    model = cfg.build_model()
    report = count_flops(model, mode=args.mode) if args.what == "flops" else count_params(model)
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table())
    return EXIT_OK


def _cmd_inspect_positions(args):
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_split(args, args.split)
    if args.samples:
        dataset = dataset.subset(args.samples)
    result = evaluate(model, dataset)
    payload = {
        "accuracy": result.accuracy,
        "layers": [
            {"entropy_nats": h, "histogram": hist.tolist()}
            for h, hist in zip(result.entropies, result.histograms)
        ] if result.histograms is not None else [],
    }
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="splinecnn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on MNIST IDX data")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p, test=False)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--single-sample", action="store_true",
                   help="use the sparse per-sample inference path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a small model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=5, help="probed coordinates per parameter")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("flops", help="parameter and FLOP report")
    _add_config_flags(p)
    p.add_argument("--mode", default="single-sample",
                   choices=["single-sample", "batch-amortized"])
    p.add_argument("--what", default="flops", choices=["flops", "params"])
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("inspect-positions", help="position histograms of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p, test=False)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=_cmd_inspect_positions)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestError as exc:
        print(f"ingest error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
