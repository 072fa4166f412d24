"""Command-line entry point: ``bnnrisk <subcommand> ...``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness

log = logging.getLogger("bnnrisk")


def _add_config_args(p, data=True, training=True):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    if data:
        p.add_argument("--n-train", type=int, dest="data.n_train")
        p.add_argument("--n-test", type=int, dest="data.n_test")
        p.add_argument("--n-ood", type=int, dest="data.n_ood")
        p.add_argument("--n-features", type=int, dest="data.n_features")
    if training:
        p.add_argument("--epochs", type=int, help="epochs for both networks")
        p.add_argument("--batch-size", type=int, help="minibatch size for both networks")
        p.add_argument("--learning-rate", type=float, dest="train.learning_rate")
        p.add_argument("--kl-weighting", choices=("uniform", "geometric"), dest="train.kl_weighting")
        p.add_argument("--train-samples", type=int, dest="train.n_samples", help="MC samples per step")
        p.add_argument("--hidden-sizes", help="comma-separated hidden widths, e.g. 128,128")
        p.add_argument("--gbdt-trees", type=int, dest="gbdt.n_trees")
        p.add_argument("--gbdt-depth", type=int, dest="gbdt.max_depth")
        p.add_argument("--mask-features", dest="masked_features", help="'auto', 'none' or comma-separated names")
        p.add_argument("-T", "--samples", type=int, dest="T", help="posterior samples at prediction time")


def _config_from_args(args):
    overrides = {}
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "out", "data", "model", "predictions", "verbose", "func"):
            continue
        if key == "epochs":
            overrides["train.epochs"] = overrides["deterministic.epochs"] = value
        elif key == "batch_size":
            overrides["train.batch_size"] = overrides["deterministic.batch_size"] = value
        elif key == "hidden_sizes":
            overrides["hidden_sizes"] = [int(h) for h in value.split(",")]
        else:
            overrides[key] = value
    return harness.load_config(args.config, overrides)


def _cmd_generate(args):
    config = _config_from_args(args)
    out = harness.generate_data(config, args.out)
    print(f"wrote {out}")
    return 0


def _cmd_train(args):
    config = _config_from_args(args)
    path = harness.train_models(config, args.data, args.out)
    print(f"wrote {path} (config digest {config.digest()})")
    return 0


def _cmd_predict(args):
    path = harness.predict_file(args.model, args.data, args.out, T=args.T, seed=args.seed)
    print(f"wrote {path}")
    return 0


def _cmd_evaluate(args):
    report = harness.evaluate(args.predictions, args.out)
    print(json.dumps({"auroc": report["auroc"], "risk_coverage": report["risk_coverage"]}, indent=2))
    return 0


def _cmd_ood(args):
    report = harness.ood_report(args.predictions, args.out)
    print(json.dumps(report["uncertainty_shift"], indent=2))
    return 0


def _cmd_bounds(args):
    rep = harness.verify_bounds_file(args.predictions, args.out)
    print(f"{rep.n_records} records, {rep.n_violations} bound violations, worst margin {rep.worst_margin:.3e}")
    return 0 if rep.ok else 1


def _cmd_run(args):
    config = _config_from_args(args)
    summary = harness.run_experiment(config, args.out, data_dir=args.data)
    print(json.dumps(summary, indent=2, default=str))
    ok = summary["bounds_violations"] == 0
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="bnnrisk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic train/test/ood CSVs")
    _add_config_args(p, training=False)
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="fit BNN, deterministic net and GBDT")
    _add_config_args(p, data=False)
    p.add_argument("--data", required=True, help="directory with train.csv/test.csv[/ood.csv]")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="MC predictions for test and OOD records")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV to write")
    p.add_argument("-T", "--samples", type=int, dest="T")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_predict)

    for name, func, help_text in (
        ("evaluate", _cmd_evaluate, "risk-coverage, AUROC and error-detection reports"),
        ("ood-report", _cmd_ood, "OOD uncertainty inflation and detection table"),
        ("verify-bounds", _cmd_bounds, "check every record against the loss bounds"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--predictions", required=True, nargs="+")
        p.add_argument("--out", required=True, help="report directory")
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="all stages in sequence")
    _add_config_args(p)
    p.add_argument("--data", help="use an existing data directory instead of generating one")
    p.add_argument("--out", required=True, help="experiment directory")
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    for attr in ("data", "model"):
        value = getattr(args, attr, None)
        if value is not None and not Path(value).exists():
            print(f"error: {attr} path {value} does not exist", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (harness.StageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
