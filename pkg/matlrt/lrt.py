"""Likelihood ratio statistic for row and column dependence and its Monte Carlo null distribution.

The statistic is invariant under Y -> D1 Y D2 for positive diagonal D1, D2, so a single null
sample drawn from N(0, I, I) serves the whole null hypothesis."""
import json
import logging
import math
import os
import tempfile
import threading
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from matlrt.core import RelationalMatrix, DiagonalCovariance, RngStream, UserError, \
    DimensionError, RankDeficiencyError
from matlrt.estimator import fit_full, fit_null, fit_null_replicates, fit_full_replicates
from matlrt.simulation import Simulation

logger = logging.getLogger(__name__)

MIN_MONTE_CARLO_SAMPLES = 100
DEFAULT_S = 10000
TABLE_S = 100000
NEGATIVE_SLACK = 1e-9
MAX_RESAMPLE_ATTEMPTS = 100
CACHE_FORMAT_VERSION = 1

REFERENCE_NULL_QUANTILES_95: Dict[int, float] = {
    5: 43.3, 10: 144.3, 15: 297.4, 20: 502.8, 25: 760.0, 30: 1064.6, 50: 2802.1, 100: 10668.4,
}
REFERENCE_TRADE_QUANTILE_95 = 729.8

Data = Union[RelationalMatrix, Sequence[RelationalMatrix]]


@dataclass(frozen=True)
class TestSpec:
    """Identifies one null distribution: dimension, replicate count, diagonal handling,
    replicate scaling, Monte Carlo size and seed."""
    __test__ = False

    m: int
    p: int = 1
    missing_diagonal: bool = False
    heteroscedastic: bool = False
    S: int = DEFAULT_S  # pylint: disable=invalid-name
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise UserError(f"m must be at least 2, got {self.m}.")
        if self.p < 1:
            raise UserError(f"p must be at least 1, got {self.p}.")
        if self.S < MIN_MONTE_CARLO_SAMPLES:
            raise UserError(f"S must be at least {MIN_MONTE_CARLO_SAMPLES}, got {self.S}.")
        if not 0 <= self.seed < 2 ** 64:
            raise UserError(f"Seed must be a 64-bit unsigned integer, got {self.seed}.")

    def to_dict(self) -> Dict:
        """:returns: the spec fields as a plain dictionary."""
        return asdict(self)


# pylint: disable=too-few-public-methods,too-many-instance-attributes
class TestResult:
    """Outcome of a Monte Carlo likelihood ratio test."""
    __test__ = False

    statistic: float
    p_value: float
    quantile_95: float
    null_sample_summary: Tuple[int, float, float]
    spec: TestSpec
    level: float
    critical_value: float
    reject: bool
    cache_hit: bool
    cache_path: Optional[str]
    approximate_null: bool

    # pylint: disable=too-many-arguments
    def __init__(self, observed: float, null_sample: np.ndarray, spec: TestSpec,
                 level: float = 0.05, cache_hit: bool = False, cache_path: Optional[str] = None,
                 approximate_null: bool = False):
        self.statistic = observed
        self.p_value = p_value(null_sample, observed)
        self.quantile_95 = quantile(null_sample, 0.95)
        self.null_sample_summary = (len(null_sample), float(np.mean(null_sample)),
                                    float(np.std(null_sample, ddof=1)))
        self.spec = spec
        self.level = level
        self.critical_value = quantile(null_sample, 1 - level)
        self.reject = bool(observed > self.critical_value)
        self.cache_hit = cache_hit
        self.cache_path = cache_path
        self.approximate_null = approximate_null

    def __repr__(self):
        return f"TestResult(statistic={self.statistic}, p_value={self.p_value}, " \
               f"reject={self.reject})"

    def to_dict(self) -> Dict:
        """:returns: the result as a JSON-ready dictionary."""
        count, mean, std = self.null_sample_summary
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "quantile_95": self.quantile_95,
            "level": self.level,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "null_sample_summary": {"count": count, "mean": mean, "sd": std},
            "spec": self.spec.to_dict(),
            "cache_hit": self.cache_hit,
            "cache_path": self.cache_path,
            "approximate_null": self.approximate_null,
        }


def _clamp(value: float) -> float:
    if -NEGATIVE_SLACK < value < 0:
        return 0.0
    return value


def statistic(y: RelationalMatrix) -> float:
    """T(Y) = m (log|D_c| + log|D_r| - log|Y Y^t / m|), computed as the difference of the
    minimized scaled log likelihoods under the null and the unrestricted model."""
    full = fit_full(y)
    null = fit_null(y)
    return _clamp(null.scaled_loglik - full.scaled_loglik)


def statistic_replicates(ys: Sequence[RelationalMatrix], heteroscedastic: bool = False) -> float:
    """Statistic for a stack of replicates Y_1..Y_p, optionally with per-replicate scales."""
    null = fit_null_replicates(ys, heteroscedastic)
    full = fit_full_replicates(ys, heteroscedastic)
    return _clamp(null.scaled_loglik - full.scaled_loglik)


def _draw_null(spec: TestSpec, generator: np.random.Generator,
               null_cov: Optional[DiagonalCovariance]) -> List[RelationalMatrix]:
    draws = []
    for _ in range(spec.p):
        z = generator.standard_normal((spec.m, spec.m))
        if null_cov is not None:
            z = np.sqrt(null_cov.d_r)[:, None] * z * np.sqrt(null_cov.d_c)[None, :]
        draws.append(RelationalMatrix(z, diagonal_defined=not spec.missing_diagonal))
    return draws


def _statistic_for(spec: TestSpec, ys: List[RelationalMatrix]) -> float:
    if spec.p == 1 and not spec.heteroscedastic:
        return statistic(ys[0])
    return statistic_replicates(ys, spec.heteroscedastic)


def simulate_null_statistic(spec: TestSpec, index: int,
                            null_cov: Optional[DiagonalCovariance] = None) -> float:
    """Null statistic for Monte Carlo replicate `index`, drawn from its own stream.

    Rank-deficient draws are resampled from reserved child streams."""
    stream = RngStream(spec.seed, index)
    for attempt in range(MAX_RESAMPLE_ATTEMPTS + 1):
        try:
            return _statistic_for(spec, _draw_null(spec, stream.generator(), null_cov))
        except RankDeficiencyError:
            logger.warning("Null draw %d was rank deficient, resampling (attempt %d).",
                           index, attempt + 1)
            stream = RngStream(spec.seed, index).child(attempt + 1)
    raise RankDeficiencyError(f"Null draw {index} stayed rank deficient after "
                              f"{MAX_RESAMPLE_ATTEMPTS} resamples.")


def _simulate_chunk(spec: TestSpec, indices: np.ndarray,
                    null_cov: Optional[DiagonalCovariance]) -> List[float]:
    return [simulate_null_statistic(spec, int(index), null_cov) for index in indices]


def null_distribution(spec: TestSpec, workers: int = 1,
                      null_cov: Optional[DiagonalCovariance] = None) -> np.ndarray:
    """Simulate S statistics under the null and return them sorted ascending.

    Replicate s always uses stream (seed, s), so the result does not depend on `workers`.
    :param null_cov: optional member of the null family to draw from instead of N(0, I, I)
    """
    if null_cov is not None and null_cov.m != spec.m:
        raise DimensionError(f"Null covariance has dimension {null_cov.m}, expected {spec.m}.")
    logger.info("Simulating %d null statistics for m=%d, p=%d.", spec.S, spec.m, spec.p)
    n_chunks = 1 if workers == 1 else max(1, min(spec.S, 4 * worker_count(workers)))
    chunks = np.array_split(np.arange(spec.S), n_chunks)
    results = Parallel(n_jobs=workers)(
        delayed(_simulate_chunk)(spec, chunk, null_cov) for chunk in chunks)
    return np.sort(np.concatenate([np.asarray(chunk, dtype=float) for chunk in results]))


def worker_count(workers: int) -> int:
    """:returns: the number of processes joblib uses for `workers` (negative counts from the
    number of CPUs)."""
    if workers < 0:
        return max(1, (os.cpu_count() or 1) + 1 + workers)
    return workers


def quantile(null_sample: Sequence[float], q: float) -> float:
    """Smallest simulated value t such that the fraction of simulated values <= t is at
    least q."""
    if not 0 < q < 1:
        raise UserError(f"Quantile level must lie in (0, 1), got {q}.")
    n = len(null_sample)
    if n == 0:
        raise UserError("Null sample is empty.")
    rank = q * n
    if abs(rank - round(rank)) < 1e-9:
        rank = round(rank)
    return float(null_sample[max(math.ceil(rank) - 1, 0)])


def p_value(null_sample: Sequence[float], observed: float) -> float:
    """(1 + #{T_s >= observed}) / (S + 1) for a sorted null sample."""
    n = len(null_sample)
    if n == 0:
        raise UserError("Null sample is empty.")
    exceeding = n - int(np.searchsorted(np.asarray(null_sample), observed, side="left"))
    return (1 + exceeding) / (n + 1)


_FILE_LOCK = threading.Lock()


def sample_file_header(spec: TestSpec) -> Dict:
    """:returns: the header stored in front of the values of a null sample file."""
    return {
        "format_version": CACHE_FORMAT_VERSION,
        "m": spec.m,
        "p": spec.p,
        "missing_diagonal": spec.missing_diagonal,
        "heteroscedastic": spec.heteroscedastic,
        "S": spec.S,
        "seed": spec.seed,
        "byte_order": "little",
    }


def write_sample_file(path: str, spec: TestSpec, null_sample: np.ndarray) -> str:
    """Write one ASCII JSON header line with sorted keys, then the S values as little-endian
    float64. The file is published by an atomic rename.
    :returns: the path"""
    if len(null_sample) != spec.S:
        raise UserError(f"Null sample has {len(null_sample)} values, expected {spec.S}.")
    header = json.dumps(sample_file_header(spec), sort_keys=True).encode("ascii") + b"\n"
    payload = np.asarray(null_sample, dtype="<f8").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    with _FILE_LOCK:
        os.makedirs(directory, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=directory, delete=False) as file:
            file.write(header)
            file.write(payload)
            temporary = file.name
        os.replace(temporary, path)
    logger.info("Stored null sample in %s.", path)
    return path


def read_sample_file(path: str) -> Tuple[Dict, np.ndarray]:
    """:returns: (header, values) of a null sample file"""
    with open(path, "rb") as file:
        header_line = file.readline()
        payload = file.read()
    try:
        header = json.loads(header_line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UserError(f"'{path}' is not a null sample file.") from exc
    if len(payload) % 8:
        raise UserError(f"'{path}' is truncated.")
    return header, np.frombuffer(payload, dtype="<f8").astype(float)


class QuantileCache:
    """Directory of simulated null samples keyed by the full `TestSpec`."""
    directory: str

    def __init__(self, directory: str):
        self.directory = directory

    def __repr__(self):
        return f"QuantileCache({self.directory!r})"

    def path_for(self, spec: TestSpec) -> str:
        """:returns: the cache file path for the given spec."""
        name = f"null_m{spec.m}_p{spec.p}_md{int(spec.missing_diagonal)}_" \
               f"h{int(spec.heteroscedastic)}_S{spec.S}_seed{spec.seed}.bin"
        return os.path.join(self.directory, name)

    def load(self, spec: TestSpec) -> Optional[np.ndarray]:
        """:returns: the cached sorted null sample, or None if there is no valid entry."""
        path = self.path_for(spec)
        if not os.path.exists(path):
            return None
        try:
            header, values = read_sample_file(path)
        except UserError:
            logger.warning("Ignoring unreadable cache file %s.", path)
            return None
        if header != sample_file_header(spec) or len(values) != spec.S:
            logger.warning("Ignoring cache file %s with mismatching header.", path)
            return None
        return values

    def store(self, spec: TestSpec, null_sample: np.ndarray) -> str:
        """Write a sorted null sample for the given spec.
        :returns: the path of the cache file."""
        return write_sample_file(self.path_for(spec), spec, null_sample)

    def get_or_create(self, spec: TestSpec, workers: int = 1) -> Tuple[np.ndarray, bool]:
        """:returns: (sorted null sample, whether it came from the cache)"""
        cached = self.load(spec)
        if cached is not None:
            logger.info("Cache hit for %s.", self.path_for(spec))
            return cached, True
        logger.info("Cache miss for %s.", self.path_for(spec))
        sample = null_distribution(spec, workers)
        self.store(spec, sample)
        return sample, False


def _as_stack(data: Data, spec: TestSpec) -> List[RelationalMatrix]:
    ys = [data] if isinstance(data, RelationalMatrix) else list(data)
    if len(ys) != spec.p:
        raise DimensionError(f"Expected {spec.p} replicates, got {len(ys)}.")
    for y in ys:
        if y.m != spec.m:
            raise DimensionError(f"Expected m={spec.m}, got {y.m}.")
        if not y.diagonal_defined and not spec.missing_diagonal:
            raise UserError("Data with an undefined diagonal requires the missing-diagonal null.")
    if spec.missing_diagonal:
        ys = [y if not y.diagonal_defined else y.zero_filled() for y in ys]
    return ys


# pylint: disable=too-many-arguments
def run_test(data: Data, spec: TestSpec, cache: Optional[QuantileCache] = None,
             workers: int = 1, level: float = 0.05,
             approximate_null: bool = False) -> TestResult:
    """Compute the statistic for `data` and compare it with the simulated null for `spec`.
    :param data: one relational matrix, or a stack of `spec.p` replicates
    :param cache: quantile cache consulted before simulating
    :param approximate_null: mark the reference distribution as approximate (residual data)
    """
    if not 0 < level < 1:
        raise UserError(f"Level must lie in (0, 1), got {level}.")
    observed = _statistic_for(spec, _as_stack(data, spec))
    if cache is not None:
        sample, hit = cache.get_or_create(spec, workers)
        path: Optional[str] = cache.path_for(spec)
    else:
        sample, hit, path = null_distribution(spec, workers), False, None
    return TestResult(observed, sample, spec, level, hit, path, approximate_null)


# pylint: disable=too-many-arguments
def null_quantile_table(ms: Sequence[int], S: int = TABLE_S, seed: int = 0,  # pylint: disable=invalid-name
                        level: float = 0.05, workers: int = 1,
                        cache: Optional[QuantileCache] = None) -> pd.DataFrame:
    """Simulated (1 - level) null quantiles for several dimensions, next to the published 95%
    reference values where they exist."""
    rows = []
    for m in ms:
        spec = TestSpec(m=m, S=S, seed=seed)
        if cache is not None:
            sample, _ = cache.get_or_create(spec, workers)
        else:
            sample = null_distribution(spec, workers)
        value = quantile(sample, 1 - level)
        reference = REFERENCE_NULL_QUANTILES_95.get(m, np.nan) if math.isclose(level, 0.05) \
            else np.nan
        rows.append({"m": m, "quantile": value, "reference": reference,
                     "relative_error": (value - reference) / reference})
    return pd.DataFrame(rows).set_index("m")


class NullQuantileStudy(Simulation):
    """Null quantile table for several dimensions, exported as CSV with one row per m."""
    index_column = "m"
    ms: List[int]
    S: int  # pylint: disable=invalid-name
    seed: int
    level: float
    workers: int
    cache: Optional[QuantileCache]
    table: Optional[pd.DataFrame]

    # pylint: disable=too-many-arguments
    def __init__(self, export_directory: str, identifier: str, ms: Sequence[int],
                 S: int = TABLE_S, seed: int = 0, level: float = 0.05,  # pylint: disable=invalid-name
                 workers: int = 1, cache: Optional[QuantileCache] = None):
        super().__init__(export_directory, identifier)
        self.ms = list(ms)
        self.S = S
        self.seed = seed
        self.level = level
        self.workers = workers
        self.cache = cache
        self.table = None

    def simulate(self):
        self.table = null_quantile_table(self.ms, self.S, self.seed, self.level, self.workers,
                                         self.cache)

    def get_results(self) -> Dict[str, List]:
        if self.table is None:
            raise UserError("Run simulate() before exporting results.")
        return {
            "m": self.table.index.tolist(),
            "quantile": self.table["quantile"].tolist(),
            "reference": self.table["reference"].tolist(),
            "relative_error": self.table["relative_error"].tolist(),
        }

    def get_metadata(self) -> Dict[str, str]:
        metadata = super().get_metadata()
        metadata.update({"seed": str(self.seed), "S": str(self.S), "level": str(self.level)})
        return metadata
