"""Main entry point for the inner-envelope command-line tool."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .cli import FIT_METHODS, RunConfig, run_command
from .config import KERNEL_FAMILIES, configure_logging
from .errors import InnerEnvelopeError
from .modelselect import SELECTION_ESTIMATORS
from .simulate import SCENARIOS

logger = logging.getLogger(__name__)


def _dim_arg(value: str) -> Optional[int]:
    if value == "auto":
        return None
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {value!r}")


def _bandwidth_arg(value: str) -> Optional[float]:
    if value == "cv":
        return None
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number or 'cv', got {value!r}")


def _columns_arg(value: str) -> tuple:
    return tuple(c.strip() for c in value.split(",") if c.strip())


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", type=Path, required=True, help="CSV with x1..xp,y1..yr columns")
    parser.add_argument("--x-cols", type=_columns_arg, help="Comma-separated predictor columns")
    parser.add_argument("--y-cols", type=_columns_arg, help="Comma-separated response columns")


def _add_solver_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--kernel", choices=KERNEL_FAMILIES, help="Kernel family (default: INNENV_KERNEL or biweight)")
    parser.add_argument("--bandwidth", type=_bandwidth_arg, default=None, help="Common bandwidth, or 'cv' (default)")
    parser.add_argument("--delta", type=float, default=1e-6, help="Convergence tolerance on theta")
    parser.add_argument("--max-iter", type=int, default=100, help="Maximum outer iterations")
    parser.add_argument("--jobs", type=int, help="Worker threads (default: INNENV_JOBS or 1)")


def _add_dims_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--u", type=_dim_arg, default=None, help="dim(S1) or 'auto'")
    parser.add_argument("--d", type=_dim_arg, default=None, help="dim(S2) or 'auto'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inner-envelope",
        description="Inner envelope regression - semiparametric fits, dimension selection and benchmarks",
    )
    parser.add_argument("--version", action="version", version=f"inner-envelope {__version__}")
    parser.add_argument("--log-level", help="Logging level (default: INNENV_LOG_LEVEL or WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Fit one estimator and write fit.json")
    _add_data_args(fit)
    _add_dims_args(fit)
    _add_solver_args(fit)
    fit.add_argument("--method", choices=FIT_METHODS, default="global")
    fit.add_argument("--B", type=int, default=50, help="Replicates for automatic dimension selection")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--output", type=Path, required=True, help="Output directory")

    simulate = sub.add_parser("simulate", help="Generate a dataset with its true subspaces")
    simulate.add_argument("--scenario", choices=SCENARIOS, required=True)
    simulate.add_argument("--n", type=int, required=True)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--output", type=Path, required=True, help="Output directory")

    select = sub.add_parser("select-dim", help="Bootstrap selection of (u, d)")
    _add_data_args(select)
    _add_solver_args(select)
    select.add_argument("--method", choices=SELECTION_ESTIMATORS, default="gmm")
    select.add_argument("--B", type=int, default=50)
    select.add_argument("--seed", type=int, default=0)
    select.add_argument("--output", type=Path, required=True, help="Output directory")

    boot = sub.add_parser("bootstrap", help="Bootstrap standard errors of beta")
    _add_data_args(boot)
    _add_dims_args(boot)
    _add_solver_args(boot)
    boot.add_argument("--method", choices=FIT_METHODS, default="global")
    boot.add_argument("--B", type=int, default=100)
    boot.add_argument("--seed", type=int, default=0)
    boot.add_argument("--output", type=Path, required=True, help="Output directory")

    predict = sub.add_parser("predict", help="Predict responses from a saved fit")
    _add_data_args(predict)
    predict.add_argument("--fit", dest="fit_path", type=Path, required=True, help="fit.json from the fit command")
    predict.add_argument("--x-new", type=Path, required=True, help="CSV of new predictor rows")
    predict.add_argument("--k", type=int, default=10, help="Neighbours for the k-NN learner")
    predict.add_argument("--output", type=Path, required=True, help="Output directory")

    bench = sub.add_parser("benchmark", help="Monte Carlo comparison of estimators")
    bench.add_argument("--scenario", choices=SCENARIOS, required=True)
    bench.add_argument("--n", type=int, nargs="+", required=True, help="Sample sizes")
    bench.add_argument("--reps", type=int, default=20)
    bench.add_argument("--methods", type=_columns_arg, required=True, help="Comma-separated methods")
    bench.add_argument("--seed", type=int, required=True)
    bench.add_argument("--output", type=Path, required=True, help="Report directory")
    _add_dims_args(bench)
    _add_solver_args(bench)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Build a validated RunConfig from parsed arguments."""
    values = {k: v for k, v in vars(args).items() if k not in ("log_level",) and v is not None}
    if isinstance(values.get("n"), int):
        values["n"] = (values["n"],)
    elif "n" in values:
        values["n"] = tuple(values["n"])
    return RunConfig(**values)


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run one command and map failures to exit codes.

    Returns:
        0 on success, the error's exit code on library errors, 130 on interrupt
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        cfg = config_from_args(args)
        return run_command(cfg)
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130
    except InnerEnvelopeError as e:
        print(json.dumps({"error": e.to_dict()}, indent=2), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        print(json.dumps({"error": {"code": "UNKNOWN_ERROR", "message": str(e)}}, indent=2), file=sys.stderr)
        return 1


def main():
    """Console script entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
