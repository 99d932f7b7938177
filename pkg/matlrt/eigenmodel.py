"""Probit eigenmodel for binary networks, a_ij = 1[y_ij > gamma] with y_ij = u_i^t v_j + e_ij,
and fuzzy p-values: the test applied to posterior draws of the latent residual Y - U V^t."""
import json
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm, truncnorm

from matlrt.core import RelationalMatrix, RngStream, UserError, DimensionError
from matlrt.lrt import TestSpec, QuantileCache, null_distribution, p_value, statistic, \
    worker_count
from matlrt.simulation import Simulation

logger = logging.getLogger(__name__)

PRIOR_VARIANCE = 10.0
GAMMA_PRIOR_VARIANCE = 100.0
DEFAULT_N_ITER = 10000
DEFAULT_BURN_IN = 5000
DEFAULT_THIN = 25


class BinaryNetwork:
    """Directed binary adjacency matrix. If the diagonal is not meaningful (no self ties), the
    diagonal entries are ignored."""
    a: np.ndarray
    diagonal_meaningful: bool

    def __init__(self, a, diagonal_meaningful: bool = True):
        array = np.asarray(a)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] < 2:
            raise DimensionError(f"Adjacency matrix must be square with m >= 2, got "
                                 f"{array.shape}.")
        if not np.all(np.isin(array, (0, 1))):
            raise UserError("Adjacency matrix entries must be 0 or 1.")
        self.a = array.astype(np.int8)
        self.diagonal_meaningful = diagonal_meaningful

    def __repr__(self):
        return f"BinaryNetwork(m={self.m}, density={self.density:.4f})"

    @property
    def m(self) -> int:
        """Number of nodes."""
        return self.a.shape[0]

    def observed_mask(self) -> np.ndarray:
        """:returns: boolean mask of the entries that carry information."""
        mask = np.ones(self.a.shape, dtype=bool)
        if not self.diagonal_meaningful:
            np.fill_diagonal(mask, False)
        return mask

    @property
    def density(self) -> float:
        """Fraction of ties among the observed entries."""
        return float(np.mean(self.a[self.observed_mask()]))


# pylint: disable=too-few-public-methods
class EigenmodelState:
    """One retained state of the sampler."""
    iteration: int
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    gamma: float

    # pylint: disable=too-many-arguments
    def __init__(self, iteration: int, y: np.ndarray, u: np.ndarray, v: np.ndarray,
                 gamma: float):
        self.iteration = iteration
        self.y = y
        self.u = u
        self.v = v
        self.gamma = gamma

    def __repr__(self):
        return f"EigenmodelState(iteration={self.iteration}, rank={self.u.shape[1]}, " \
               f"gamma={self.gamma:.4f})"

    def residual(self, diagonal_defined: bool = True) -> RelationalMatrix:
        """:returns: Y - U V^t"""
        return RelationalMatrix(self.y - self.u @ self.v.T, diagonal_defined)


class FuzzyPValueSample:
    """Statistic and p-value for every retained state."""
    iterations: np.ndarray
    statistics: np.ndarray
    p_values: np.ndarray

    def __init__(self, iterations: Sequence[int], statistics: Sequence[float],
                 p_values: Sequence[float]):
        self.iterations = np.asarray(iterations, dtype=int)
        self.statistics = np.asarray(statistics, dtype=float)
        self.p_values = np.asarray(p_values, dtype=float)

    def __repr__(self):
        return f"FuzzyPValueSample(n={len(self.p_values)}, " \
               f"median_p={float(np.median(self.p_values)):.4f})"

    @property
    def draws(self) -> List[Tuple[float, float]]:
        """(statistic, p_value) pairs in iteration order."""
        return list(zip(self.statistics.tolist(), self.p_values.tolist()))

    def fraction_below(self, alpha: float) -> float:
        """:returns: the posterior probability that the p-value is below alpha."""
        return float(np.mean(self.p_values < alpha))


def fixed_gamma(net: BinaryNetwork) -> float:
    """Probit threshold matching the observed density: Phi^-1(1 - density)."""
    density = net.density
    if not 0 < density < 1:
        raise UserError("The network needs both ties and non-ties.")
    return float(norm.ppf(1 - density))


def _sample_latent(net: BinaryNetwork, mean: np.ndarray, gamma: float,
                   generator: np.random.Generator) -> np.ndarray:
    """Truncated normal update of Y given U V^t and the sign constraints."""
    ties = net.a == 1
    lower = np.where(ties, gamma - mean, -np.inf)
    upper = np.where(ties, np.inf, gamma - mean)
    y = truncnorm.rvs(lower, upper, loc=mean, scale=1.0, size=mean.shape,
                      random_state=generator)
    above = np.nextafter(gamma, np.inf)
    y = np.where(np.isfinite(y), y, np.where(ties, above, gamma))
    y = np.where(ties, np.maximum(y, above), np.minimum(y, gamma))
    if not net.diagonal_meaningful:
        diagonal = np.diag(mean) + generator.standard_normal(net.m)
        np.fill_diagonal(y, diagonal)
    return y


def _sample_factor(y: np.ndarray, other: np.ndarray, prior_variance: float,
                   generator: np.random.Generator) -> np.ndarray:
    """Rows x_i | Y ~ N(C other^t y_i, C) with C = (other^t other + I / prior_variance)^-1."""
    rank = other.shape[1]
    precision = other.T @ other + np.eye(rank) / prior_variance
    covariance = np.linalg.inv(precision)
    covariance = (covariance + covariance.T) / 2
    mean = y @ other @ covariance
    cholesky = np.linalg.cholesky(covariance)
    return mean + generator.standard_normal(mean.shape) @ cholesky.T


def _sample_gamma(net: BinaryNetwork, y: np.ndarray, generator: np.random.Generator) -> float:
    """gamma | Y, A ~ N(0, GAMMA_PRIOR_VARIANCE) truncated to (max y over non-ties,
    min y over ties)."""
    mask = net.observed_mask()
    ties = (net.a == 1) & mask
    non_ties = (net.a == 0) & mask
    lower = float(np.max(y[non_ties])) if np.any(non_ties) else -np.inf
    upper = float(np.min(y[ties])) if np.any(ties) else np.inf
    scale = np.sqrt(GAMMA_PRIOR_VARIANCE)
    gamma = float(truncnorm.rvs(lower / scale, upper / scale, loc=0.0, scale=scale,
                                random_state=generator))
    return min(max(gamma, lower), np.nextafter(upper, -np.inf))


# pylint: disable=too-many-arguments,too-many-locals
def gibbs_fit(net: BinaryNetwork, rank: int, n_iter: int = DEFAULT_N_ITER,
              burn_in: int = DEFAULT_BURN_IN, thin: int = DEFAULT_THIN,
              rng: RngStream = RngStream(0), fix_gamma: bool = False,
              prior_variance: float = PRIOR_VARIANCE,
              callback: Optional[Callable[[int, EigenmodelState], None]] = None
              ) -> List[EigenmodelState]:
    """Gibbs sampler for the probit eigenmodel of rank R.

    Each sweep updates Y from truncated normals, the rows of U and V from their conjugate
    normal full conditionals and, unless `fix_gamma`, the threshold gamma.
    :param callback: called as callback(iteration, state) after every sweep
    :returns: states after `burn_in` at every `thin`-th iteration
    """
    if not 0 <= rank < net.m:
        raise UserError(f"Rank must lie in [0, m), got {rank}.")
    if n_iter <= burn_in or burn_in < 0:
        raise UserError(f"n_iter ({n_iter}) must exceed burn_in ({burn_in}) >= 0.")
    if thin < 1:
        raise UserError(f"thin must be positive, got {thin}.")
    if prior_variance <= 0:
        raise UserError(f"Prior variance must be positive, got {prior_variance}.")
    generator = rng.generator()
    gamma = fixed_gamma(net)
    u = np.zeros((net.m, rank))
    v = np.zeros((net.m, rank))
    states: List[EigenmodelState] = []
    for iteration in range(1, n_iter + 1):
        y = _sample_latent(net, u @ v.T, gamma, generator)
        if rank > 0:
            u = _sample_factor(y, v, prior_variance, generator)
            v = _sample_factor(y.T, u, prior_variance, generator)
        if not fix_gamma:
            gamma = _sample_gamma(net, y, generator)
        state = EigenmodelState(iteration, y, u, v, gamma)
        if callback is not None:
            callback(iteration, state)
        if iteration > burn_in and (iteration - burn_in) % thin == 0:
            states.append(state)
    logger.info("Eigenmodel chain of rank %d retained %d states.", rank, len(states))
    return states


def _residual_statistics(states: Sequence[EigenmodelState],
                         diagonal_defined: bool) -> List[float]:
    return [statistic(state.residual(diagonal_defined)) for state in states]


def fuzzy_p_values(states: Sequence[EigenmodelState], spec: TestSpec,
                   cache: Optional[QuantileCache] = None, workers: int = 1) -> FuzzyPValueSample:
    """Test every retained residual Y - U V^t against the single-matrix null for `spec`.

    With `spec.missing_diagonal` the residual diagonals are zero-filled."""
    if len(states) == 0:
        raise UserError("No retained states.")
    if spec.p != 1:
        raise UserError("Fuzzy p-values use the single-matrix null (p = 1).")
    if states[0].y.shape[0] != spec.m:
        raise DimensionError(f"States have m={states[0].y.shape[0]}, spec has m={spec.m}.")
    if cache is not None:
        sample, _ = cache.get_or_create(spec, workers)
    else:
        sample = null_distribution(spec, workers)
    n_chunks = 1 if workers == 1 else max(1, min(len(states), worker_count(workers)))
    chunks = [list(states[start::n_chunks]) for start in range(n_chunks)]
    results = Parallel(n_jobs=workers)(
        delayed(_residual_statistics)(chunk, not spec.missing_diagonal) for chunk in chunks)
    by_iteration: Dict[int, float] = {}
    for chunk, values in zip(chunks, results):
        for state, value in zip(chunk, values):
            by_iteration[state.iteration] = value
    iterations = [state.iteration for state in states]
    statistics = [by_iteration[iteration] for iteration in iterations]
    return FuzzyPValueSample(iterations, statistics,
                             [p_value(sample, value) for value in statistics])


def simulate_network(m: int, rank: int, density: float, rng: RngStream, scale: float = 1.0,
                     diagonal_meaningful: bool = True) -> Tuple[BinaryNetwork, np.ndarray]:
    """Draw a network from the eigenmodel with planted factors U, V ~ N(0, scale^2) and the
    threshold set so that the expected density is close to `density`.
    :returns: (network, planted U V^t)"""
    if not 0 < density < 1:
        raise UserError(f"Density must lie in (0, 1), got {density}.")
    if not 0 <= rank < m:
        raise UserError(f"Rank must lie in [0, m), got {rank}.")
    generator = rng.generator()
    u = scale * generator.standard_normal((m, rank))
    v = scale * generator.standard_normal((m, rank))
    planted = u @ v.T
    y = planted + generator.standard_normal((m, m))
    gamma = float(np.quantile(y, 1 - density))
    return BinaryNetwork((y > gamma).astype(int), diagonal_meaningful), planted


class FuzzyPValueStudy(Simulation):
    """Eigenmodel fit followed by fuzzy p-values, exported as (iteration, statistic, p_value)."""
    index_column = "iteration"
    net: BinaryNetwork
    rank: int
    spec: TestSpec
    n_iter: int
    burn_in: int
    thin: int
    fix_gamma: bool
    workers: int
    cache: Optional[QuantileCache]
    sample: Optional[FuzzyPValueSample]

    # pylint: disable=too-many-arguments
    def __init__(self, export_directory: str, identifier: str, net: BinaryNetwork, rank: int,
                 spec: TestSpec, n_iter: int = DEFAULT_N_ITER, burn_in: int = DEFAULT_BURN_IN,
                 thin: int = DEFAULT_THIN, fix_gamma: bool = False, workers: int = 1,
                 cache: Optional[QuantileCache] = None):
        super().__init__(export_directory, identifier)
        self.net = net
        self.rank = rank
        self.spec = spec
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.fix_gamma = fix_gamma
        self.workers = workers
        self.cache = cache
        self.sample = None

    def simulate(self):
        # the chain gets its own stream, disjoint from the null draws (seed, s)
        states = gibbs_fit(self.net, self.rank, self.n_iter, self.burn_in, self.thin,
                           RngStream(self.spec.seed, 0, (1,)), self.fix_gamma)
        self.sample = fuzzy_p_values(states, self.spec, self.cache, self.workers)

    def get_results(self) -> Dict[str, List]:
        if self.sample is None:
            raise UserError("Run simulate() before exporting results.")
        return {
            "iteration": self.sample.iterations.tolist(),
            "statistic": self.sample.statistics.tolist(),
            "p_value": self.sample.p_values.tolist(),
        }

    def get_metadata(self) -> Dict[str, str]:
        metadata = super().get_metadata()
        metadata.update({
            "seed": str(self.spec.seed), "S": str(self.spec.S),
            "spec": json.dumps(self.spec.to_dict(), sort_keys=True),
            "rank": str(self.rank), "n_iter": str(self.n_iter), "burn_in": str(self.burn_in),
            "thin": str(self.thin), "fix_gamma": str(self.fix_gamma),
        })
        return metadata
