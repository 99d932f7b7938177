"""Configuration for the CLI: typed argument parsers, the run configuration and YAML study
files."""
import os
import re
from typing import Any, Dict, Generic, List, Mapping, Optional, TypeVar

import numpy as np
import yaml

from matlrt.core import UserError
from matlrt.lrt import TestSpec, QuantileCache, DEFAULT_S
from matlrt.power import AlternativeKind, AlternativeSpec, exchangeable_grid, \
    exchangeable_line, sparse_pair_line, blockmodel_line, DEFAULT_N_REPS

T = TypeVar("T")

CACHE_DIR_ENV = "MATLRT_CACHE_DIR"
DEFAULT_CACHE_DIR = os.path.join("~", ".cache", "matlrt")


# pylint: disable=too-few-public-methods
class Colors:
    """ANSI colors for terminal output."""
    OKGREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'


# pylint: disable=too-few-public-methods
class Parsable(Generic[T]):
    """Interface for objects that can be parsed from a input string."""

    @staticmethod
    def get_value(input_str: str) -> T:
        """Parses the input string and returns the corresponding value."""
        raise NotImplementedError()

    @classmethod
    def argparse_type(cls, input_str: str) -> T:
        """`type=` callable for argparse, turning parse failures into `UserError`."""
        try:
            return cls.get_value(input_str)
        except ValueError as exc:
            raise UserError(f"Invalid value '{input_str}': {exc}") from exc


class Float(Parsable):
    """A float that can be parsed from a string, including percentages like `5%`."""

    @staticmethod
    def get_value(input_str: str) -> float:
        match = re.match(r"^(-?\d+((\.|,)\d+)?)%$", input_str.strip())
        if match:
            return float(match.group(1).replace(",", ".")) / 100
        return float(input_str)


class FloatGrid(Parsable):
    """A list of floats given as `lo:hi:n` (n equally spaced values) or as a comma list."""

    @staticmethod
    def get_value(input_str: str) -> List[float]:
        text = str(input_str).strip()
        match = re.match(r"^([^:]+):([^:]+):(\d+)$", text)
        if match:
            count = int(match.group(3))
            if count < 1:
                raise ValueError("a grid needs at least one point")
            values = np.linspace(Float.get_value(match.group(1)), Float.get_value(match.group(2)),
                                 count)
            return [float(value) for value in values]
        return [Float.get_value(item) for item in text.split(",") if item.strip()]


class AlternativeKindParser(Parsable):
    """Parser for `AlternativeKind`"""

    @staticmethod
    def get_value(input_str: str) -> AlternativeKind:
        match input_str.lower().replace("-", "_"):
            case "exchangeable" | "exch":
                return AlternativeKind.EXCHANGEABLE
            case "sparse_pair" | "sparse" | "pair":
                return AlternativeKind.SPARSE_PAIR
            case "blockmodel" | "block" | "sbm":
                return AlternativeKind.BLOCKMODEL
            case other:
                raise ValueError(f"Invalid alternative: {other}")


def resolve_cache_dir(flag: Optional[str], environ: Mapping[str, str] = os.environ) -> str:
    """The cache directory: `MATLRT_CACHE_DIR` if set, else the flag, else the default."""
    directory = environ.get(CACHE_DIR_ENV) or flag or DEFAULT_CACHE_DIR
    return os.path.abspath(os.path.expanduser(directory))


def load_yaml(path: str) -> Dict[str, Any]:
    """Read a YAML run configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as file:
            content = yaml.safe_load(file) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UserError(f"Could not read configuration '{path}': {exc}") from exc
    if not isinstance(content, dict):
        raise UserError(f"Configuration '{path}' must be a mapping.")
    return content


def _grid(value: Any, default: List[float]) -> List[float]:
    if value is None:
        return default
    if isinstance(value, (int, float)):
        return [float(value)]
    if isinstance(value, list):
        return [float(item) for item in value]
    return FloatGrid.argparse_type(str(value))


def _ms(value: Any) -> List[int]:
    if value is None:
        raise UserError("Every study needs m.")
    return [int(item) for item in value] if isinstance(value, list) else [int(value)]


# pylint: disable=too-few-public-methods
class StudyConfig:
    """One power curve: alternatives of a single dimension."""
    name: str
    m: int
    alts: List[AlternativeSpec]

    def __init__(self, name: str, m: int, alts: List[AlternativeSpec]):
        self.name = name
        self.m = m
        self.alts = alts

    def __repr__(self):
        return f"StudyConfig({self.name}, m={self.m}, points={len(self.alts)})"


def build_studies(entries: List[Dict[str, Any]], full_grid: bool = False) -> List[StudyConfig]:
    """Turn the `studies` list of a YAML run configuration into power curves.

    Each entry names a `kind`, one or more `m`, and grids (`lo:hi:n`, lists or scalars) for
    `rho_r`/`rho_c`, `rho` or `mu`."""
    studies = []
    for position, entry in enumerate(entries):
        kind = AlternativeKindParser.argparse_type(str(entry.get("kind", "")))
        for m in _ms(entry.get("m")):
            name = str(entry.get("name", f"{kind}_{position + 1}")) + f"_m{m}"
            match kind:
                case AlternativeKind.EXCHANGEABLE if entry.get("rho_r") is None:
                    alts = exchangeable_grid(m, full=full_grid)
                case AlternativeKind.EXCHANGEABLE:
                    alts = [alt for rho_c in _grid(entry.get("rho_c"), [0.0])
                            for alt in exchangeable_line(m, _grid(entry["rho_r"], []), rho_c)]
                case AlternativeKind.SPARSE_PAIR:
                    alts = sparse_pair_line(m, _grid(entry.get("rho"), []))
                case _:
                    alts = blockmodel_line(m, _grid(entry.get("mu"), []))
            if not alts:
                raise UserError(f"Study {name} has no grid points.")
            studies.append(StudyConfig(name, m, alts))
    return studies


# pylint: disable=too-many-instance-attributes,too-few-public-methods
class RunConfig:
    """Everything a CLI run needs, validated before compute starts."""
    subcommand: str
    inputs: List[str]
    replicates: List[str]
    covariates: Optional[str]
    names: Optional[str]
    edge_list: Optional[str]
    config: Optional[str]
    missing_diagonal: bool
    heteroscedastic: bool
    S: int  # pylint: disable=invalid-name
    seed: int
    level: float
    cache_dir: str
    workers: int
    output: Optional[str]
    verbosity: int
    options: Dict[str, Any]

    def __init__(self, subcommand: str, arguments: Dict[str, Any],
                 environ: Mapping[str, str] = os.environ):
        self.subcommand = subcommand
        self.inputs = [arguments["input"]] if arguments.get("input") else []
        self.replicates = list(arguments.get("replicates") or [])
        self.covariates = arguments.get("covariates")
        self.names = arguments.get("names")
        self.edge_list = arguments.get("edge_list")
        self.config = arguments.get("config")
        self.missing_diagonal = bool(arguments.get("missing_diagonal"))
        self.heteroscedastic = bool(arguments.get("heteroscedastic"))
        self.S = int(arguments.get("S") or DEFAULT_S)
        self.seed = int(arguments.get("seed") or 0)
        self.level = float(arguments.get("level") or 0.05)
        self.cache_dir = resolve_cache_dir(arguments.get("cache_dir"), environ)
        self.workers = int(arguments.get("workers") or -1)
        self.output = arguments.get("output")
        self.verbosity = int(arguments.get("verbose") or 0)
        self.options = arguments
        if self.config:
            self._apply_yaml(load_yaml(self.config), arguments)
        self.validate()

    def __repr__(self):
        return f"RunConfig({self.subcommand}, S={self.S}, seed={self.seed})"

    def _apply_yaml(self, content: Dict[str, Any], arguments: Dict[str, Any]):
        """Values from the configuration file apply where no flag was given."""
        defaults = {"S": DEFAULT_S, "seed": 0, "level": 0.05, "workers": -1}
        for key, default in defaults.items():
            if key in content and arguments.get(key) is None:
                setattr(self, key, type(default)(content[key]))
        if arguments.get("n_reps") is None and "n_reps" in content:
            self.options = dict(self.options, n_reps=int(content["n_reps"]))
        self.options = dict(self.options, studies=content.get("studies") or [])

    def validate(self):
        """Check paths and numbers before any computation."""
        for path in self.inputs + self.replicates + [
                p for p in (self.covariates, self.names, self.edge_list, self.config) if p]:
            if not os.path.isfile(path):
                raise UserError(f"Input file '{path}' does not exist.")
        if self.output:
            directory = os.path.dirname(os.path.abspath(self.output))
            if not os.path.isdir(directory):
                raise UserError(f"Output directory '{directory}' does not exist.")
        if not 0 < self.level < 1:
            raise UserError(f"Level must lie in (0, 1), got {self.level}.")
        if self.workers == 0:
            raise UserError("Worker count must not be 0.")
        self.spec_for(2)

    @property
    def n_reps(self) -> int:
        """Replications per power point."""
        return int(self.options.get("n_reps") or DEFAULT_N_REPS)

    def cache(self) -> QuantileCache:
        """:returns: the quantile cache in the configured directory."""
        return QuantileCache(self.cache_dir)

    def spec_for(self, m: int, p: int = 1) -> TestSpec:
        """:returns: the test spec for data of dimension m with p replicates."""
        return TestSpec(m=m, p=p, missing_diagonal=self.missing_diagonal,
                        heteroscedastic=self.heteroscedastic, S=self.S, seed=self.seed)
