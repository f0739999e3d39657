"""
Command-line entry point: every check and experiment is a subcommand that
writes plain files (JSON/CSV/PGM, optionally XLSX) under --out-dir and a
config.json echo of its arguments.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .activations import LIBRARY_SPECS, ActivationKind, ActivationSpec, batch_d2x
from .analysis import (DEFAULT_COMPARE_ACTIVATIONS, DEFAULT_LANDSCAPE_ACTIVATIONS, DEFAULT_SWEEP_ALPHAS,
                       LandscapeSpec, SweepSpec, activation_slug, compare_landscapes, compare_table,
                       lib_comparison, run_sweep, sweep_pivot)
from .data_health_checker import DatasetHealthChecker, log_health_check_results
from .data_processor import Dataset, load_mnist_subset, synthetic_split
from .errors import InvalidSpecError, NoAdaptiveSitesError, UluKitError
from .export_utils import write_csv, write_excel, write_json, write_matrix_csv, write_pgm
from .harness import TrainConfig, train
from .models import Architecture, ModelConfig
from .verify import FdConfig, approximation_table, gradient_check_table

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DATA_DIR_ENV = "ULU_DATA_DIR"
LOG_LEVEL_ENV = "ULU_LOG_LEVEL"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(UluKitError):
    """Arguments parsed but cannot be acted on (e.g. no data source)"""


def _activation_arg(text: str) -> ActivationSpec:
    try:
        return ActivationSpec.parse(text)
    except InvalidSpecError as e:
        raise argparse.ArgumentTypeError(str(e))


def _alphas_arg(text: str) -> Tuple[float, ...]:
    try:
        alphas = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}")
    if not alphas or min(alphas) <= 0:
        raise argparse.ArgumentTypeError(f"Alphas must be a non-empty list of positive numbers, got {text!r}")
    return alphas


def _configure_logging(args: argparse.Namespace):
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.getLevelName(os.environ.get(LOG_LEVEL_ENV, "INFO").upper())
    unknown = not isinstance(level, int)
    logging.basicConfig(level=logging.INFO if unknown else level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    if unknown:
        logger.warning("Ignoring unknown %s=%r, logging at INFO", LOG_LEVEL_ENV, os.environ[LOG_LEVEL_ENV])


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Seed for weights, data subsets and batch order")
    common.add_argument("--out-dir", type=Path, default=Path("out"), help="Directory for output files")
    common.add_argument("--data-dir", type=Path, default=None,
                        help=f"Directory with MNIST IDX files (default: ${DATA_DIR_ENV})")
    common.add_argument("--synthetic", action="store_true", help="Use generated blob images instead of MNIST")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only")
    return common


def _training_parser() -> argparse.ArgumentParser:
    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--model", choices=[arch.value for arch in Architecture], default="cnn")
    training.add_argument("--epochs", type=int, default=10)
    training.add_argument("--batch-size", type=int, default=32)
    training.add_argument("--lr", type=float, default=0.05)
    training.add_argument("--momentum", type=float, default=0.9)
    training.add_argument("--weight-decay", type=float, default=5e-5)
    training.add_argument("--train-n", type=int, default=2000, help="Stratified training subset size")
    training.add_argument("--test-n", type=int, default=1000, help="Stratified test subset size")
    training.add_argument("--share-betas", action="store_true", help="One beta pair for the whole model")
    training.add_argument("--freeze-betas", action="store_true",
                          help="Keep AULU betas at their initial values; with ulu, train frozen AULU sites "
                               "holding its coefficients")
    return training


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    training = _training_parser()

    parser = argparse.ArgumentParser(prog="ulu-kit", description="ULU/AULU activation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subcommands = parser.add_subparsers(dest="subcommand", required=True)

    p = subcommands.add_parser("check-gradients", parents=[common],
                               help="Compare analytic derivatives against finite differences")
    p.add_argument("--activation", type=_activation_arg, action="append",
                   help="Activation to check (repeatable; default: the whole library)")
    p.add_argument("--grid-points", type=int, default=2001)
    p.add_argument("--tol", type=float, default=1e-6, help="Relative tolerance")
    p.add_argument("--abs-tol", type=float, default=1e-9, help="Absolute tolerance")
    p.add_argument("--step", type=float, default=1e-5, help="Finite-difference step")
    p.set_defaults(handler=check_gradients)

    p = subcommands.add_parser("train", parents=[common, training], help="Train one model")
    p.add_argument("--activation", type=_activation_arg, default=ActivationSpec.ulu(0.3, 0.8))
    p.add_argument("--save-params", action="store_true", help="Also write the trained params.bin")
    p.set_defaults(handler=train_command)

    p = subcommands.add_parser("sweep", parents=[common, training], help="ULU(alpha1, alpha2) accuracy grid")
    p.add_argument("--alphas", type=_alphas_arg, default=DEFAULT_SWEEP_ALPHAS,
                   help="Comma-separated alphas applied to both axes")
    p.add_argument("--jobs", type=int, default=1, help="Concurrent training runs")
    p.add_argument("--excel", action="store_true", help="Also write sweep.xlsx")
    p.set_defaults(handler=sweep)

    p = subcommands.add_parser("landscape", parents=[common], help="Output landscapes of a random deep network")
    p.add_argument("--activation", type=_activation_arg, action="append",
                   help="Activation to compare (repeatable)")
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--grid-lo", type=float, default=-5.0)
    p.add_argument("--grid-hi", type=float, default=5.0)
    p.set_defaults(handler=landscape_command)

    p = subcommands.add_parser("compare", parents=[common, training], help="Repeated-run accuracy table")
    p.add_argument("--activation", type=_activation_arg, action="append",
                   help="Activation to compare (repeatable)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--excel", action="store_true", help="Also write compare.xlsx")
    p.set_defaults(handler=compare)

    p = subcommands.add_parser("lib-report", parents=[common, training],
                               help="LIB of an AULU CNN against an AULU attention model")
    p.add_argument("--activation", type=_activation_arg, default=ActivationSpec.parse("aulu"))
    p.set_defaults(handler=lib_report)

    p = subcommands.add_parser("curves", parents=[common], help="Activation value and derivative curves")
    p.add_argument("--activation", type=_activation_arg, default=ActivationSpec.ulu(0.3, 0.8))
    p.add_argument("--lo", type=float, default=-5.0)
    p.add_argument("--hi", type=float, default=5.0)
    p.add_argument("--points", type=int, default=1001)
    p.set_defaults(handler=curves)

    return parser


def _config_echo(args: argparse.Namespace) -> dict:
    echo = {}
    for key, value in vars(args).items():
        if key == "handler":
            continue
        if isinstance(value, (list, tuple)):
            value = [str(item) if isinstance(item, ActivationSpec) else item for item in value]
        elif isinstance(value, (ActivationSpec, Path)):
            value = str(value)
        echo[key] = value
    return echo


def _train_config(args: argparse.Namespace, activation: ActivationSpec) -> TrainConfig:
    model = ModelConfig(
        arch=Architecture(args.model),
        activation=activation,
        share_betas=args.share_betas,
        freeze_betas=args.freeze_betas,
    )
    return TrainConfig(
        model=model,
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )


def load_data(args: argparse.Namespace, expected_shape: Tuple[int, int]) -> Tuple[Dataset, Dataset]:
    """Train/test subsets from --synthetic, --data-dir or $ULU_DATA_DIR, health-checked"""
    if args.synthetic:
        ds_train, ds_test = synthetic_split(args.train_n, args.test_n, args.seed, image_size=expected_shape[0])
    else:
        data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV)
        if not data_dir:
            raise UsageError(f"No data source: pass --data-dir, set {DATA_DIR_ENV} or use --synthetic")
        try:
            ds_train, ds_test = load_mnist_subset(data_dir, args.train_n, args.test_n, args.seed)
        except FileNotFoundError as e:
            raise UsageError(str(e))

    for dataset in (ds_train, ds_test):
        results = DatasetHealthChecker(dataset, expected_shape).run_comprehensive_check()
        if not log_health_check_results(results):
            raise UluKitError(f"{dataset.name} failed its health check: {'; '.join(results['critical'])}")
    return ds_train, ds_test


def check_gradients(args: argparse.Namespace) -> int:
    specs = args.activation or [ActivationSpec.parse(text) for text in LIBRARY_SPECS]
    table = gradient_check_table(specs, grid_points=args.grid_points, rel_tol=args.tol,
                                 abs_tol=args.abs_tol, cfg=FdConfig(step=args.step))
    write_csv(table, args.out_dir / "gradient_check.csv")
    print(table.to_string(index=False))
    return EXIT_OK if table["passed"].all() else EXIT_FAILURE


def train_command(args: argparse.Namespace) -> int:
    cfg = _train_config(args, args.activation)
    ds_train, ds_test = load_data(args, cfg.model.input_shape)
    record = train(cfg, ds_train, ds_test)

    write_json(record.to_dict(), args.out_dir / "run.json")
    write_csv(record.curves_frame(), args.out_dir / "curves.csv")
    write_csv(record.betas_frame(), args.out_dir / "betas.csv")
    if args.save_params:
        record.model.store.save(args.out_dir / "params.bin")

    logger.info("Training took %.1fs", record.wall_seconds)
    if record.diverged:
        logger.warning("Training diverged; final_test_acc recorded as 0")
    print(f"final_test_acc={record.final_test_acc:.4f} diverged={record.diverged}")
    return EXIT_OK


def sweep(args: argparse.Namespace) -> int:
    base = _train_config(args, ActivationSpec.ulu(1.0, 1.0))
    spec = SweepSpec(alpha_values=args.alphas, base=base, parallelism=args.jobs)
    ds_train, ds_test = load_data(args, base.model.input_shape)
    table = run_sweep(spec, ds_train, ds_test)

    write_csv(table, args.out_dir / "sweep.csv")
    if args.excel:
        write_excel({"sweep": table, "accuracy_grid": sweep_pivot(table)}, args.out_dir / "sweep.xlsx")
    print(table.to_string(index=False))
    return EXIT_OK


def landscape_command(args: argparse.Namespace) -> int:
    activations = args.activation or [ActivationSpec.parse(text) for text in DEFAULT_LANDSCAPE_ACTIVATIONS]
    spec = LandscapeSpec(layers=args.layers, width=args.width, grid_lo=args.grid_lo,
                         grid_hi=args.grid_hi, resolution=args.resolution, seed=args.seed)
    summary, matrices = compare_landscapes(activations, spec)

    for activation in activations:
        slug = activation_slug(activation)
        write_matrix_csv(matrices[str(activation)], args.out_dir / f"landscape_{slug}.csv")
        write_pgm(matrices[str(activation)], args.out_dir / f"landscape_{slug}.pgm")
    write_csv(summary, args.out_dir / "landscape_summary.csv")
    print(summary.to_string(index=False))
    return EXIT_OK


def compare(args: argparse.Namespace) -> int:
    activations = args.activation or [ActivationSpec.parse(text) for text in DEFAULT_COMPARE_ACTIVATIONS]
    cfg = _train_config(args, activations[0])
    ds_train, ds_test = load_data(args, cfg.model.input_shape)
    table = compare_table(activations, cfg, args.repeats, ds_train, ds_test, parallelism=args.jobs)

    write_csv(table, args.out_dir / "compare.csv")
    if args.excel:
        write_excel({"compare": table}, args.out_dir / "compare.xlsx")
    print(table.to_string(index=False))
    return EXIT_OK


def lib_report(args: argparse.Namespace) -> int:
    if not args.activation.is_adaptive:
        raise NoAdaptiveSitesError(f"lib-report needs an adaptive activation (aulu), got {args.activation}")
    cfg = _train_config(args, args.activation)
    ds_train, ds_test = load_data(args, cfg.model.input_shape)
    report = lib_comparison(cfg, ds_train, ds_test)

    write_json(report, args.out_dir / "lib_report.json")
    print(f"observation: {report['observation']}")
    return EXIT_OK


def curves(args: argparse.Namespace) -> int:
    if args.points < 2 or not args.lo < args.hi:
        raise InvalidSpecError(f"Need points >= 2 and lo < hi, got {args.points} points on [{args.lo}, {args.hi}]")
    xs = np.linspace(args.lo, args.hi, args.points)
    activation = args.activation
    frame = pd.DataFrame({"x": xs, "f": activation.value(xs), "df": activation.derivative(xs)})
    if activation.kind in (ActivationKind.ULU, ActivationKind.AULU):
        if activation.is_adaptive:
            c1, c2 = activation.initial_adaptive_params().coefficients()
        else:
            c1, c2 = activation.params
        frame["d2f"] = batch_d2x(c1, c2, xs)
    else:
        frame["d2f"] = np.nan

    write_csv(frame, args.out_dir / "curves.csv")
    write_csv(approximation_table(), args.out_dir / "approximations.csv")
    print(f"wrote {len(frame)} points for {activation}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    _configure_logging(args)
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        write_json({"subcommand": args.subcommand, **_config_echo(args)}, args.out_dir / "config.json")
        return args.handler(args)
    except (UsageError, InvalidSpecError, NoAdaptiveSitesError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except UluKitError as e:
        logger.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
