"""Command-line entry point: one subcommand per pipeline stage."""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import harness, nnet
from .attacks import ATTACKS
from .detector import load_detector, save_detector, train_adaboost
from .errors import KpShieldError
from .kp import kp_batch
from .tensorio import load_tensor, save_tensor

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 and a one-line remedy."""

    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message} (see '{self.prog} --help')\n")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for required flags and unset optional ones."""

    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def _dims(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected W,H,C integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers W,H,C, got {text!r}")
    return dims


def _params(text):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"--params must be a JSON object, got {text!r}") from None
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("--params must be a JSON object")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _require_inputs(*paths):
    for path in paths:
        if not os.path.exists(path):
            raise UsageError(f"input path does not exist: {path}")


def _load_images(path):
    """A dataset directory or a KPT1 tensor of shape (N, w, h, c) or (w, h, c)."""
    if os.path.isdir(path):
        return harness.load_dataset(path)
    arr = load_tensor(path).astype(np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return arr


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    ds = harness.synth_dataset(args.seed, args.classes, args.per_class, args.dims, noise=args.noise)
    harness.save_dataset(ds, args.out)


def cmd_train_model(args):
    _require_inputs(args.data)
    ds = harness.load_dataset(args.data)
    model = nnet.ARCHITECTURES[args.arch](ds.dims, args.classes or ds.num_classes, seed=args.seed)
    model = nnet.train_sgd(model, ds.images, ds.labels, lr=args.lr, epochs=args.epochs, batch=args.batch,
                           seed=args.seed)
    nnet.save_model(model, args.out)


def cmd_attack(args):
    _require_inputs(args.model, args.data)
    model = nnet.load_model(args.model)
    ds = harness.load_dataset(args.data)
    results = harness.make_adversarial_set(model, args.attack, ds, args.count, args.params, args.parallelism)
    images = np.stack([r.adversarial for r in results]) if results else np.zeros((0,) + ds.dims)
    save_tensor(images, args.out)
    if args.index_out:
        lines = ["adversarial_index,source_index,original_class,adversarial_class,distance_l2"]
        lines += [f"{i},{r.source_index},{r.original_class},{r.adversarial_class},{r.distance_l2!r}"
                  for i, r in enumerate(results)]
        harness.write_text(args.index_out, "\n".join(lines) + "\n")


def cmd_kp(args):
    _require_inputs(args.model, args.images)
    model = nnet.load_model(args.model)
    model_id = args.model_id or model.name
    data = _load_images(args.images)
    if isinstance(data, harness.Dataset):
        if args.source != "benign":
            raise UsageError("dataset directories are benign inputs; pass a .kpt tensor for adversarial images")
        rows = harness.benign_rows(model, model_id, data, args.parallelism)
    else:
        points = kp_batch(model, data, args.parallelism)
        rows = [harness.KpRow.from_point(pt, i, args.source, model_id) for i, pt in enumerate(points)]
    harness.export_scatter(rows, args.out_csv)


def _read_rows(paths):
    _require_inputs(*paths)
    rows = []
    for path in paths:
        rows += harness.read_kp_csv(path)
    return rows


def cmd_fit_detector(args):
    rows = _read_rows(args.kp_csv)
    X = np.array([r.features for r in rows], dtype=np.float64).reshape(-1, 2)
    y = np.array([int(r.source != "benign") for r in rows], dtype=np.int64)
    det = train_adaboost(X, y, n_estimators=args.estimators, max_depth=args.depth)
    save_detector(det, args.out)


def cmd_detect(args):
    _require_inputs(args.detector)
    det = load_detector(args.detector)
    rows = _read_rows(args.kp_csv)
    lines = ["sample_id,source,model_id,label,margin"]
    for r in rows:
        label, margin = det.detect(r.features)
        lines.append(f"{r.sample_id},{r.source},{r.model_id},{'adversarial' if label else 'benign'},{margin!r}")
    text = "\n".join(lines) + "\n"
    if args.out_csv:
        harness.write_text(args.out_csv, text)
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    rows = _read_rows(args.runs)
    runs = harness.pair_runs_from_rows(rows, args.benign_count, args.seed)
    config = {"mode": args.mode, "benign_count": args.benign_count, "test_size": args.test_size,
              "seed": args.seed, "n_estimators": args.estimators, "max_depth": args.depth}
    if args.mode == "intra":
        intra = [harness.intra_model_eval(run, args.benign_count, args.test_size, args.seed + i,
                                          args.estimators, args.depth) for i, run in enumerate(runs)]
        report = harness.DetectionReport([(r.label, r.counts) for r in runs], [], intra, config)
    else:
        report = harness.inter_model_matrix(runs, args.estimators, args.depth, config=config)
    harness.export_report(report, args.out_json)


def cmd_export_plots(args):
    harness.export_gnuplot(_read_rows(args.kp_csv), args.out_dir)


def cmd_experiment(args):
    cfg = harness.ExperimentConfig(dims=args.dims, num_classes=args.classes, adversarial_count=args.count,
                                   benign_count=args.benign_count, parallelism=args.parallelism)
    report = harness.run_experiment(cfg, args.out_dir)
    json.dump(report.averages, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# --------------------------------------------------------------------------
# parser

def build_parser():
    fmt = _HelpFormatter
    parser = _Parser(prog="kpshield", formatter_class=fmt,
                     description="Detect adversarial images from where truncated row-PCA reconstructions flip "
                                 "a classifier's prediction.",
                     epilog="Set KP_SHIELD_LOG to error, info or debug to control logging.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic oriented-bar dataset directory")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--per-class", type=_positive, default=100, help="samples per class")
    p.add_argument("--dims", type=_dims, default=(32, 32, 1), help="image dims W,H,C (W >= 16)")
    p.add_argument("--noise", type=float, default=0.08, help="Gaussian noise standard deviation")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("train-model", cmd_train_model, "train a classifier on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--arch", choices=sorted(nnet.ARCHITECTURES), default="smallconv", help="architecture")
    p.add_argument("--classes", type=int, default=0, help="class count (0 = infer from labels)")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--lr", type=float, default=0.05, help="SGD learning rate")
    p.add_argument("--batch", type=_positive, default=32, help="minibatch size")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    p.add_argument("--out", required=True, help="output model file (KPM1)")

    p = add("attack", cmd_attack, "generate successful adversarial examples from correctly classified samples")
    p.add_argument("--model", required=True, help="model file (KPM1)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--attack", choices=sorted(ATTACKS), required=True, help="attack")
    p.add_argument("--count", type=_positive, default=100, help="number of successful examples wanted")
    p.add_argument("--params", type=_params, default={}, help="attack parameters as a JSON object")
    p.add_argument("--parallelism", type=_positive, default=1, help="worker threads")
    p.add_argument("--index-out", default=None, help="optional CSV mapping outputs to source samples")
    p.add_argument("--out", required=True, help="output tensor file (KPT1)")

    p = add("kp", cmd_kp, "compute (k, p) points and write them as CSV")
    p.add_argument("--model", required=True, help="model file (KPM1)")
    p.add_argument("--images", required=True, help="KPT1 image tensor, or a dataset directory for benign inputs")
    p.add_argument("--source", choices=harness.SOURCES, default="benign", help="source tag written to the CSV")
    p.add_argument("--model-id", default=None, help="model tag written to the CSV (default: architecture name)")
    p.add_argument("--parallelism", type=_positive, default=1, help="worker threads")
    p.add_argument("--out-csv", required=True, help="output kp CSV")

    p = add("fit-detector", cmd_fit_detector, "train the AdaBoost detector on kp CSV files")
    p.add_argument("--kp-csv", nargs="+", required=True, help="kp CSV files (benign rows are label 0)")
    p.add_argument("--estimators", type=_positive, default=200, help="boosting rounds")
    p.add_argument("--depth", type=_positive, default=2, help="depth of each weak tree")
    p.add_argument("--out", required=True, help="output detector file (KPD1)")

    p = add("detect", cmd_detect, "label kp CSV rows with a trained detector")
    p.add_argument("--detector", required=True, help="detector file (KPD1)")
    p.add_argument("--kp-csv", nargs="+", required=True, help="kp CSV files")
    p.add_argument("--out-csv", default=None, help="output CSV (default: stdout)")

    p = add("eval", cmd_eval, "intra-pair or cross-pair detection accuracy as a JSON report")
    p.add_argument("--mode", choices=("intra", "cross"), default="intra", help="evaluation protocol")
    p.add_argument("--runs", nargs="+", required=True, help="kp CSV files holding benign and adversarial rows")
    p.add_argument("--benign-count", type=_positive, default=128, help="benign rows drawn per pair")
    p.add_argument("--test-size", type=float, default=0.2, help="held-out fraction (intra mode)")
    p.add_argument("--estimators", type=_positive, default=200, help="boosting rounds")
    p.add_argument("--depth", type=_positive, default=2, help="depth of each weak tree")
    p.add_argument("--seed", type=int, default=0, help="benign resampling and split seed")
    p.add_argument("--out-json", required=True, help="output report JSON")

    p = add("export-plots", cmd_export_plots, "write gnuplot-ready scatter data per (source, model)")
    p.add_argument("--kp-csv", nargs="+", required=True, help="kp CSV files")
    p.add_argument("--out-dir", required=True, help="output directory")

    p = add("experiment", cmd_experiment, "run the whole synthetic pipeline with default seeds")
    p.add_argument("--dims", type=_dims, default=(32, 32, 1), help="image dims W,H,C")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--count", type=_positive, default=50, help="adversarial examples per pair")
    p.add_argument("--benign-count", type=_positive, default=64, help="benign rows per pair")
    p.add_argument("--parallelism", type=_positive, default=1, help="worker threads")
    p.add_argument("--out-dir", required=True, help="output directory")
    return parser


def _configure_logging():
    name = os.environ.get("KP_SHIELD_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"KP_SHIELD_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        _configure_logging()
        args.func(args)
    except UsageError as exc:
        print(f"kpshield {args.command}: error: {exc} (see 'kpshield {args.command} --help')", file=sys.stderr)
        return EXIT_USAGE
    except KpShieldError as exc:
        print(f"kpshield {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
