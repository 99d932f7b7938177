"""Main entrypoint of the command-line interface: tests, null quantiles, power studies,
eigenmodel fuzzy p-values and dyadic demeaning."""
import argparse
import json
import logging
import math
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from matlrt import __version__
from matlrt.cli.config import RunConfig, Colors, Float, FloatGrid, AlternativeKindParser, \
    StudyConfig, build_studies
from matlrt.core import UserError, NumericalError
from matlrt.data_io import read_dense_matrix, read_dense_stack, read_long_format, \
    write_long_format, read_edge_list, read_adjacency
from matlrt.eigenmodel import FuzzyPValueStudy, DEFAULT_N_ITER, DEFAULT_BURN_IN, DEFAULT_THIN
from matlrt.lrt import TestResult, NullQuantileStudy, null_distribution, quantile, run_test, \
    write_sample_file, REFERENCE_NULL_QUANTILES_95, TABLE_S
from matlrt.meanmodel import ols_demean, trade_workflow
from matlrt.power import AlternativeKind, PowerStudy, check_monotone, exchangeable_grid, \
    exchangeable_line, sparse_pair_line, blockmodel_line

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_USER_ERROR = 2
EXIT_NUMERICAL_ERROR = 3
TABLE_MS = [5, 10, 15, 20, 25, 30]
LONG_RUN_MS = [50, 100]


def format_json(value: Any, indent: int = 0) -> str:
    """Serialize like `json.dumps(..., indent=2, sort_keys=True)` but with floats written to 17
    significant digits and non-finite floats as null."""
    pad = "  " * (indent + 1)
    match value:
        case bool() | None:
            return json.dumps(value)
        case float() | np.floating():
            return format(float(value), ".17g") if math.isfinite(value) else "null"
        case int() | np.integer():
            return str(int(value))
        case str():
            return json.dumps(value)
        case dict():
            if not value:
                return "{}"
            items = [f"{pad}{json.dumps(str(key))}: {format_json(item, indent + 1)}"
                     for key, item in sorted(value.items())]
            return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
        case list() | tuple() | np.ndarray():
            if len(value) == 0:
                return "[]"
            items = [pad + format_json(item, indent + 1) for item in list(value)]
            return "[\n" + ",\n".join(items) + "\n" + "  " * indent + "]"
        case other:
            raise TypeError(f"Cannot serialize {type(other).__name__}")


def _emit(text: str, output: Optional[str]):
    if output:
        with open(output, "w", encoding="utf-8", newline="\n") as file:
            file.write(text + "\n")
    else:
        print(text)


def _success(message: str):
    print(f"{message} {Colors.OKGREEN}✓{Colors.ENDC}", file=sys.stderr)


def build_report(result: TestResult, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """:returns: the versioned JSON report of a test. Whether the null sample came from the
    cache is logged, not reported, so repeated runs give identical reports."""
    report = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "seed": result.spec.seed,
        "S": result.spec.S,
    }
    report.update(result.to_dict())
    logger.info("Null sample %s.", "read from cache" if report.pop("cache_hit") else "simulated")
    if extra:
        report.update(extra)
    return report


def cmd_test(config: RunConfig) -> int:
    """Test a matrix, a replicate stack, or a long-format panel after demeaning."""
    cache = config.cache()
    if config.covariates:
        panel = read_long_format(config.covariates, config.missing_diagonal, config.names)
        spec = config.spec_for(len(panel.nodes), len(panel.ys))
        result = trade_workflow(panel.ys, panel.design, spec, cache, config.workers,
                                config.level)
        extra: Dict[str, Any] = {"covariates": panel.design.names}
    elif config.replicates:
        ys = read_dense_stack(config.replicates, config.missing_diagonal)
        result = run_test(ys, config.spec_for(ys[0].m, len(ys)), cache, config.workers,
                          config.level)
        extra = {}
    elif config.inputs:
        y = read_dense_matrix(config.inputs[0], config.missing_diagonal)
        result = run_test(y, config.spec_for(y.m), cache, config.workers, config.level)
        extra = {}
    else:
        raise UserError("Give --input, --replicates or --covariates.")
    _emit(format_json(build_report(result, extra)), config.output)
    _success(f"T = {result.statistic:.6g}, p = {result.p_value:.4g}")
    return EXIT_OK


def cmd_null(config: RunConfig) -> int:
    """Simulate a null sample into a cache-format file, or a quantile table with --table."""
    ms: List[int] = config.options.get("m") or []
    if config.options.get("table"):
        ms = ms or TABLE_MS + (LONG_RUN_MS if config.options.get("long_run") else [])
        samples = config.options.get("S") or TABLE_S
        output = config.output or "null_quantiles.csv"
        study = NullQuantileStudy(os.path.dirname(os.path.abspath(output)),
                                  os.path.splitext(os.path.basename(output))[0], ms, samples,
                                  config.seed, config.level, config.workers, config.cache())
        study.simulate()
        path = study.write_csv()
        _success(f"Wrote null quantile table to {path}")
        return EXIT_OK
    if len(ms) != 1:
        raise UserError("Give exactly one --m, or use --table.")
    spec = config.spec_for(ms[0], int(config.options.get("p") or 1))
    if config.output:
        sample = null_distribution(spec, config.workers)
        path = write_sample_file(config.output, spec, sample)
    else:
        cache = config.cache()
        sample, _ = cache.get_or_create(spec, config.workers)
        path = cache.path_for(spec)
    reference = REFERENCE_NULL_QUANTILES_95.get(spec.m)
    reference_text = f" (reference {reference})" if reference and spec.p == 1 and \
        not spec.missing_diagonal else ""
    _success(f"95% null quantile {quantile(sample, 0.95):.6g}{reference_text}, stored in {path}")
    return EXIT_OK


def _studies_from_flags(config: RunConfig) -> List[StudyConfig]:
    kind = config.options.get("kind") or AlternativeKind.EXCHANGEABLE
    grid = config.options.get("grid")
    studies = []
    for m in config.options.get("m") or [10]:
        match kind:
            case AlternativeKind.EXCHANGEABLE if grid is None:
                alts = exchangeable_grid(m, full=bool(config.options.get("full_grid")))
            case AlternativeKind.EXCHANGEABLE:
                alts = exchangeable_line(m, grid, config.options.get("rho_c") or 0.0)
            case AlternativeKind.SPARSE_PAIR:
                alts = sparse_pair_line(m, grid or [])
            case _:
                alts = blockmodel_line(m, grid or [])
        if not alts:
            raise UserError("Give --grid for sparse pair and blockmodel studies.")
        studies.append(StudyConfig(f"{kind}_m{m}", m, alts))
    return studies


def cmd_power(config: RunConfig) -> int:
    """Run power studies and write one CSV table per study into the output directory."""
    if config.config:
        studies = build_studies(config.options.get("studies") or [],
                                bool(config.options.get("full_grid")))
    else:
        studies = _studies_from_flags(config)
    if not studies:
        raise UserError("No power studies configured.")
    export_directory = config.output or "."
    for study_config in studies:
        study = PowerStudy(export_directory, study_config.name, study_config.alts,
                           config.spec_for(study_config.m), config.n_reps, config.level,
                           config.workers, config.cache())
        study.simulate()
        path = study.write_csv()
        monotone = check_monotone(study.points)
        status = "monotone" if monotone else f"{Colors.WARNING}not monotone{Colors.ENDC}"
        _success(f"Wrote {path} ({status})")
    return EXIT_OK


def cmd_eigen(config: RunConfig) -> int:
    """Fit the probit eigenmodel and write the fuzzy p-values as CSV."""
    diagonal_meaningful = not config.missing_diagonal
    if config.edge_list:
        ms = config.options.get("m") or [None]
        net = read_edge_list(config.edge_list, ms[0], diagonal_meaningful)
    elif config.inputs:
        net = read_adjacency(config.inputs[0], diagonal_meaningful)
    else:
        raise UserError("Give --input or --edge-list.")
    output = config.output or "fuzzy_p_values.csv"
    study = FuzzyPValueStudy(os.path.dirname(os.path.abspath(output)),
                             os.path.splitext(os.path.basename(output))[0], net,
                             int(config.options.get("rank") or 0), config.spec_for(net.m),
                             int(config.options.get("n_iter") or DEFAULT_N_ITER),
                             int(config.options.get("burn_in") or DEFAULT_BURN_IN),
                             int(config.options.get("thin") or DEFAULT_THIN),
                             bool(config.options.get("fix_gamma")), config.workers,
                             config.cache())
    study.simulate()
    path = study.write_csv()
    assert study.sample is not None
    _success(f"Wrote {len(study.sample.p_values)} fuzzy p-values to {path}, "
             f"P(p < {config.level:g}) = {study.sample.fraction_below(config.level):.3f}")
    return EXIT_OK


def cmd_demean(config: RunConfig) -> int:
    """Regress a long-format panel on its x_ columns; write residuals and beta_hat."""
    source = config.covariates or (config.inputs[0] if config.inputs else None)
    if source is None:
        raise UserError("Give --covariates (or --input) with a long-format panel.")
    if not config.output:
        raise UserError("Give --output for the residual table.")
    panel = read_long_format(source, config.missing_diagonal, config.names)
    stack = ols_demean(panel.ys, panel.design)
    write_long_format(config.output, stack.residuals, panel.nodes, panel.replicates)
    beta_path = os.path.splitext(config.output)[0] + ".beta.json"
    report = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "coefficients": {name: {"estimate": estimate, "standard_error": error}
                         for name, (estimate, error) in stack.coefficients().items()},
    }
    _emit(format_json(report), beta_path)
    _success(f"Wrote residuals to {config.output} and coefficients to {beta_path}")
    return EXIT_OK


COMMANDS = {
    "test": cmd_test,
    "null": cmd_null,
    "power": cmd_power,
    "eigen": cmd_eigen,
    "demean": cmd_demean,
}


def build_parser() -> argparse.ArgumentParser:
    """:returns: the argument parser with one subparser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", "-i", type=str, help="Dense CSV matrix")
    common.add_argument("--replicates", type=str, nargs="+", help="Dense CSV replicates")
    common.add_argument("--covariates", type=str, help="Long-format CSV (i, j, k, y, x_*)")
    common.add_argument("--names", type=str, help="YAML/JSON sidecar with node/replicate names")
    common.add_argument("--missing-diagonal", action="store_true",
                        help="The diagonal is undefined")
    common.add_argument("--heteroscedastic", action="store_true",
                        help="Replicates have their own scale")
    common.add_argument("--S", type=int, help="Monte Carlo sample size")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--level", type=Float.argparse_type, help="Test level, e.g. 5%%")
    common.add_argument("--cache-dir", type=str, help="Null quantile cache directory")
    common.add_argument("--workers", type=int, help="Worker processes (default: all cores)")
    common.add_argument("--output", "-o", type=str, help="Output file or directory")
    common.add_argument("--config", type=str, help="YAML run configuration")
    common.add_argument("--verbose", "-v", action="count", default=0,
                        help="More logging (-v info, -vv debug)")

    parser = argparse.ArgumentParser(prog="matlrt", description="Likelihood ratio tests for "
                                                                "row and column dependence")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("test", parents=[common], help="Test a relational data matrix")
    null = subparsers.add_parser("null", parents=[common], help="Simulate null quantiles")
    null.add_argument("--m", type=int, nargs="+", help="Dimension(s)")
    null.add_argument("--p", type=int, help="Replicates per draw")
    null.add_argument("--table", action="store_true", help="Write a null quantile table")
    null.add_argument("--long-run", action="store_true", help="Include m = 50 and 100")
    power = subparsers.add_parser("power", parents=[common], help="Run power studies")
    power.add_argument("--kind", type=AlternativeKindParser.argparse_type,
                       help="exchangeable, sparse_pair or blockmodel")
    power.add_argument("--m", type=int, nargs="+", help="Dimension(s)")
    power.add_argument("--grid", type=FloatGrid.argparse_type,
                       help="Parameter grid as lo:hi:n or a comma list")
    power.add_argument("--rho-c", type=Float.argparse_type, help="Fixed column correlation")
    power.add_argument("--n-reps", type=int, help="Replications per point")
    power.add_argument("--full-grid", action="store_true", help="25 x 25 exchangeable grid")
    eigen = subparsers.add_parser("eigen", parents=[common], help="Eigenmodel fuzzy p-values")
    eigen.add_argument("--edge-list", type=str, help="CSV of (source, target) ties")
    eigen.add_argument("--m", type=int, nargs=1, help="Number of nodes for integer edge lists")
    eigen.add_argument("--rank", type=int, help="Latent dimension R")
    eigen.add_argument("--n-iter", type=int, help="Gibbs iterations")
    eigen.add_argument("--burn-in", type=int, help="Discarded iterations")
    eigen.add_argument("--thin", type=int, help="Keep every thin-th state")
    eigen.add_argument("--fix-gamma", action="store_true",
                       help="Fix the threshold at the density quantile")
    subparsers.add_parser("demean", parents=[common], help="Remove a dyadic regression mean")
    return parser


def configure_logging(verbosity: int):
    """WARNING by default, INFO with -v, DEBUG with -vv."""
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 \
        else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entrypoint.
    :returns: 0 on success, 2 on data or usage errors, 3 on numerical failures"""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose)
        config = RunConfig(args.command, vars(args))
        return COMMANDS[args.command](config)
    except UserError as exc:
        print(f"{Colors.FAIL}Error: {exc}{Colors.ENDC}", file=sys.stderr)
        return EXIT_USER_ERROR
    except NumericalError as exc:
        print(f"{Colors.FAIL}Numerical failure: {exc}{Colors.ENDC}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
