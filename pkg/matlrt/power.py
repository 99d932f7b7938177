"""Power studies of the test against exchangeable, maximally sparse and stochastic blockmodel
alternatives."""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from matlrt.core import RelationalMatrix, SeparableCovariance, RngStream, UserError, \
    RankDeficiencyError, sample_matrix_normal
from matlrt.lrt import TestSpec, QuantileCache, null_distribution, quantile, statistic, \
    MAX_RESAMPLE_ATTEMPTS
from matlrt.simulation import Simulation

logger = logging.getLogger(__name__)

BOUNDARY_MARGIN = 1e-3
DEFAULT_N_REPS = 2000
COARSE_GRID_POINTS = 7
FULL_GRID_POINTS = 25


class AlternativeKind(Enum):
    """Family of alternatives to simulate from."""
    EXCHANGEABLE = 1
    SPARSE_PAIR = 2
    BLOCKMODEL = 3

    def __str__(self):
        match self:
            case AlternativeKind.EXCHANGEABLE:
                return "exchangeable"
            case AlternativeKind.SPARSE_PAIR:
                return "sparse_pair"
            case AlternativeKind.BLOCKMODEL:
                return "blockmodel"
            case other:
                raise ValueError(f"Invalid alternative: {other}")


@dataclass(frozen=True)
class AlternativeSpec:
    """One alternative. Exchangeable uses (rho_r, rho_c), sparse_pair uses rho, blockmodel
    uses mu.

    Exchangeable correlations must lie in the open interval (-1/(m-1), 1): at rho = 1 the
    exchangeable covariance is singular, so the upper end is excluded as well."""
    kind: AlternativeKind
    m: int
    rho_r: float = 0.0
    rho_c: float = 0.0
    rho: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.m < 2:
            raise UserError(f"m must be at least 2, got {self.m}.")
        match self.kind:
            case AlternativeKind.EXCHANGEABLE:
                lower = -1 / (self.m - 1)
                for name, value in (("rho_r", self.rho_r), ("rho_c", self.rho_c)):
                    if not lower < value < 1:
                        raise UserError(f"Exchangeable {name} must lie in ({lower:.4g}, 1), "
                                        f"got {value}.")
            case AlternativeKind.SPARSE_PAIR:
                if not abs(self.rho) < 1:
                    raise UserError(f"Sparse pair rho must satisfy |rho| < 1, got {self.rho}.")
            case AlternativeKind.BLOCKMODEL:
                if not self.mu >= 0:
                    raise UserError(f"Blockmodel mu must be nonnegative, got {self.mu}.")

    @property
    def parameter(self) -> float:
        """The parameter a power curve varies: rho_r, rho or mu."""
        match self.kind:
            case AlternativeKind.EXCHANGEABLE:
                return self.rho_r
            case AlternativeKind.SPARSE_PAIR:
                return self.rho
            case _:
                return self.mu

    def covariance(self) -> SeparableCovariance:
        """:returns: the separable covariance of exchangeable and sparse pair alternatives."""
        match self.kind:
            case AlternativeKind.EXCHANGEABLE:
                return SeparableCovariance.exchangeable(self.m, self.rho_r, self.rho_c)
            case AlternativeKind.SPARSE_PAIR:
                return SeparableCovariance.sparse_pair(self.m, self.rho)
            case _:
                raise UserError("The blockmodel covariance is not separable.")


# pylint: disable=too-few-public-methods
class PowerPoint:
    """Monte Carlo power estimate at one alternative."""
    alt: AlternativeSpec
    n_reps: int
    rejections: int
    level: float
    power: float
    mc_se: float

    def __init__(self, alt: AlternativeSpec, n_reps: int, rejections: int, level: float):
        self.alt = alt
        self.n_reps = n_reps
        self.rejections = rejections
        self.level = level
        self.power = rejections / n_reps
        self.mc_se = float(np.sqrt(self.power * (1 - self.power) / n_reps))

    def __repr__(self):
        return f"PowerPoint({self.alt}, power={self.power}, mc_se={self.mc_se})"


def _sample_blockmodel(m: int, mu: float, generator: np.random.Generator) -> np.ndarray:
    """Y = U W V^t + E with two equally likely row and column groups and
    W = [[0, -mu], [mu, 0]]."""
    u_1 = (generator.random(m) < 0.5).astype(float)
    v_1 = (generator.random(m) < 0.5).astype(float)
    u = np.column_stack([u_1, 1 - u_1])
    v = np.column_stack([v_1, 1 - v_1])
    w = np.array([[0.0, -mu], [mu, 0.0]])
    return u @ w @ v.T + generator.standard_normal((m, m))


def sample_alternative(alt: AlternativeSpec, rng: RngStream) -> RelationalMatrix:
    """Draw one relational matrix from the alternative."""
    if alt.kind == AlternativeKind.BLOCKMODEL:
        return RelationalMatrix(_sample_blockmodel(alt.m, alt.mu, rng.generator()))
    return sample_matrix_normal(alt.m, alt.covariance(), rng)


def _count_rejections(alt: AlternativeSpec, point_index: int, reps: np.ndarray, seed: int,
                      critical_value: float, missing_diagonal: bool = False) -> int:
    rejections = 0
    for rep in reps:
        stream = RngStream(seed, point_index, (int(rep),))
        for attempt in range(MAX_RESAMPLE_ATTEMPTS + 1):
            try:
                y = sample_alternative(alt, stream)
                value = statistic(y.zero_filled() if missing_diagonal else y)
                break
            except RankDeficiencyError:
                logger.warning("Alternative draw %d/%d was rank deficient, resampling.",
                               point_index, rep)
                stream = RngStream(seed, point_index, (int(rep),)).child(attempt + 1)
        else:
            raise RankDeficiencyError(f"Alternative draw {point_index}/{rep} stayed rank "
                                      f"deficient.")
        rejections += value > critical_value
    return rejections


# pylint: disable=too-many-arguments
def power_curve(alts: Sequence[AlternativeSpec], spec: TestSpec, n_reps: int = DEFAULT_N_REPS,
                level: float = 0.05, workers: int = 1,
                cache: Optional[QuantileCache] = None) -> List[PowerPoint]:
    """Estimate the power at every alternative from `n_reps` simulated datasets, rejecting
    when the statistic exceeds the simulated (1 - level) null quantile for `spec`.

    Replicate r of point k uses stream (spec.seed, k, (r,)). Only single-matrix nulls (p = 1)
    apply; with `spec.missing_diagonal` the draws are zero-filled before testing."""
    if spec.p != 1:
        raise UserError(f"Power curves test single matrices, got a null spec with p={spec.p}.")
    if n_reps < 1:
        raise UserError(f"n_reps must be positive, got {n_reps}.")
    if not 0 < level < 1:
        raise UserError(f"Level must lie in (0, 1), got {level}.")
    for alt in alts:
        if alt.m != spec.m:
            raise UserError(f"Alternative has m={alt.m}, null spec has m={spec.m}.")
    if cache is not None:
        sample, _ = cache.get_or_create(spec, workers)
    else:
        sample = null_distribution(spec, workers)
    critical_value = quantile(sample, 1 - level)
    logger.info("Estimating power at %d alternatives (m=%d, critical value %.4g).", len(alts),
                spec.m, critical_value)
    n_chunks = 1 if workers == 1 else 4
    tasks = [(index, chunk) for index in range(len(alts))
             for chunk in np.array_split(np.arange(n_reps), n_chunks) if len(chunk)]
    counts = Parallel(n_jobs=workers)(
        delayed(_count_rejections)(alts[index], index, chunk, spec.seed, critical_value,
                                   spec.missing_diagonal)
        for index, chunk in tasks)
    totals = [0] * len(alts)
    for (index, _), count in zip(tasks, counts):
        totals[index] += int(count)
    return [PowerPoint(alt, n_reps, total, level) for alt, total in zip(alts, totals)]


def rho_line(lo: float, hi: float, n_points: int,
             margin: float = BOUNDARY_MARGIN) -> np.ndarray:
    """`n_points` equally spaced values from lo to hi with both endpoints pulled `margin`
    inside the open interval."""
    if n_points < 2:
        raise UserError("A line needs at least two points.")
    values = np.linspace(lo, hi, n_points)
    values[0] += margin
    values[-1] -= margin
    return values


def mu_line(hi: float, n_points: int) -> np.ndarray:
    """`n_points` equally spaced blockmodel means from 0 to hi."""
    if n_points < 2 or hi <= 0:
        raise UserError("A mean line needs at least two points and a positive upper end.")
    return np.linspace(0.0, hi, n_points)


def exchangeable_grid(m: int, n_points: int = COARSE_GRID_POINTS,
                      full: bool = False) -> List[AlternativeSpec]:
    """Square grid over (rho_r, rho_c) in [-1/(m-1), 1]^2, 25 x 25 with `full`."""
    values = rho_line(-1 / (m - 1), 1.0, FULL_GRID_POINTS if full else n_points)
    return [AlternativeSpec(AlternativeKind.EXCHANGEABLE, m, rho_r=float(rho_r),
                            rho_c=float(rho_c)) for rho_r, rho_c in product(values, values)]


def exchangeable_line(m: int, rho_values: Sequence[float],
                      rho_c: float = 0.0) -> List[AlternativeSpec]:
    """Exchangeable alternatives varying rho_r at fixed rho_c."""
    return [AlternativeSpec(AlternativeKind.EXCHANGEABLE, m, rho_r=float(rho), rho_c=rho_c)
            for rho in rho_values]


def sparse_pair_line(m: int, rho_values: Sequence[float]) -> List[AlternativeSpec]:
    """Maximally sparse alternatives for the given correlations of the first two rows."""
    return [AlternativeSpec(AlternativeKind.SPARSE_PAIR, m, rho=float(rho)) for rho in rho_values]


def blockmodel_line(m: int, mu_values: Sequence[float]) -> List[AlternativeSpec]:
    """Blockmodel alternatives for the given group mean separations."""
    return [AlternativeSpec(AlternativeKind.BLOCKMODEL, m, mu=float(mu)) for mu in mu_values]


def check_monotone(points: Sequence[PowerPoint],
                   key: Callable[[PowerPoint], float] = lambda point: point.alt.parameter,
                   slack_se: float = 2.0) -> bool:
    """Check that power does not decrease in |key| on either side of zero, allowing
    `slack_se` combined Monte Carlo standard errors between neighbours."""
    monotone = True
    for branch in ([p for p in points if key(p) >= 0], [p for p in points if key(p) <= 0]):
        ordered = sorted(branch, key=lambda point: abs(key(point)))
        for lower, upper in zip(ordered, ordered[1:]):
            slack = slack_se * np.hypot(lower.mc_se, upper.mc_se)
            if upper.power < lower.power - slack:
                logger.warning("Power drops from %.4f at %s to %.4f at %s.", lower.power,
                               key(lower), upper.power, key(upper))
                monotone = False
    return monotone


class PowerStudy(Simulation):
    """Power curve over a list of alternatives, exported as a CSV table with one row per
    alternative."""
    alts: List[AlternativeSpec]
    spec: TestSpec
    n_reps: int
    level: float
    workers: int
    cache: Optional[QuantileCache]
    points: List[PowerPoint]

    # pylint: disable=too-many-arguments
    def __init__(self, export_directory: str, identifier: str, alts: Sequence[AlternativeSpec],
                 spec: TestSpec, n_reps: int = DEFAULT_N_REPS, level: float = 0.05,
                 workers: int = 1, cache: Optional[QuantileCache] = None):
        super().__init__(export_directory, identifier)
        self.alts = list(alts)
        self.spec = spec
        self.n_reps = n_reps
        self.level = level
        self.workers = workers
        self.cache = cache
        self.points = []

    def simulate(self):
        self.points = power_curve(self.alts, self.spec, self.n_reps, self.level, self.workers,
                                  self.cache)

    def get_results(self) -> Dict[str, List]:
        return {
            "index": list(range(len(self.points))),
            "kind": [str(point.alt.kind) for point in self.points],
            "rho_r": [point.alt.rho_r for point in self.points],
            "rho_c": [point.alt.rho_c for point in self.points],
            "rho": [point.alt.rho for point in self.points],
            "mu": [point.alt.mu for point in self.points],
            "m": [point.alt.m for point in self.points],
            "level": [point.level for point in self.points],
            "n_reps": [point.n_reps for point in self.points],
            "rejections": [point.rejections for point in self.points],
            "power": [point.power for point in self.points],
            "mc_se": [point.mc_se for point in self.points],
        }

    def get_metadata(self) -> Dict[str, str]:
        metadata = super().get_metadata()
        metadata.update({"seed": str(self.spec.seed), "S": str(self.spec.S),
                         "spec": json.dumps(self.spec.to_dict(), sort_keys=True)})
        return metadata
