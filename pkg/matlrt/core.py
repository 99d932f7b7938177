"""Core components: relational matrices, separable covariances, random streams and the
matrix normal likelihood."""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

# smallest admissible singular value of Y relative to its largest
RANK_TOLERANCE = 1e-10
# eigenvalue floor relative to the largest eigenvalue
EIGENVALUE_FLOOR = 1e-12
SYMMETRY_TOLERANCE = 1e-12


class UserError(Exception):
    """An error that is caused by the user, not by the program."""


class DimensionError(UserError):
    """Shapes of the inputs don't fit together."""


class NumericalError(Exception):
    """The numerical problem is degenerate (singular data, non positive definite matrices)."""


class RankDeficiencyError(NumericalError):
    """The data matrix is not of full rank."""


class NotPositiveDefiniteError(NumericalError):
    """A covariance matrix has a non-positive eigenvalue."""


class RelationalMatrix:
    """An m x m relational data matrix. Entry (i, j) is the directed relation from i to j.

    If `diagonal_defined` is false, the diagonal is structurally undefined and stored as 0."""
    entries: np.ndarray
    diagonal_defined: bool

    def __init__(self, entries, diagonal_defined: bool = True):
        array = np.array(entries, dtype=float)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise DimensionError(f"Relational matrix must be square, got shape {array.shape}.")
        if array.shape[0] < 2:
            raise DimensionError("Relational matrix needs at least two nodes.")
        if not diagonal_defined:
            np.fill_diagonal(array, 0.0)
        if not np.all(np.isfinite(array)):
            raise NumericalError("Relational matrix contains non-finite entries.")
        self.entries = array
        self.diagonal_defined = diagonal_defined

    @property
    def m(self) -> int:
        """Number of nodes."""
        return self.entries.shape[0]

    def __repr__(self):
        return f"RelationalMatrix(m={self.m}, diagonal_defined={self.diagonal_defined})"

    def zero_filled(self) -> "RelationalMatrix":
        """:returns: a copy with an undefined (zero) diagonal."""
        return RelationalMatrix(self.entries, diagonal_defined=False)

    def rescaled(self, d1: np.ndarray, d2: np.ndarray) -> "RelationalMatrix":
        """:returns: D1 Y D2 for the positive diagonals given as vectors."""
        return RelationalMatrix(np.asarray(d1)[:, None] * self.entries * np.asarray(d2)[None, :],
                                self.diagonal_defined)

    def check_full_rank(self):
        """Raise a `RankDeficiencyError` unless the smallest singular value is at least
        `RANK_TOLERANCE` times the largest."""
        singular_values = np.linalg.svd(self.entries, compute_uv=False)
        if singular_values[0] == 0 or singular_values[-1] / singular_values[0] < RANK_TOLERANCE:
            raise RankDeficiencyError(
                f"Data matrix is rank deficient (singular value ratio "
                f"{singular_values[-1] / max(singular_values[0], np.finfo(float).tiny):.3e}).")


def _eigh_checked(matrix: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition that refuses non positive definite input."""
    symmetric = (matrix + matrix.T) / 2
    values, vectors = np.linalg.eigh(symmetric)
    if values[-1] <= 0 or values[0] <= EIGENVALUE_FLOOR * values[-1]:
        raise NotPositiveDefiniteError(
            f"{name} is not positive definite (smallest eigenvalue {values[0]:.3e}).")
    return values, vectors


def sym_sqrt(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetric square root via eigendecomposition."""
    values, vectors = _eigh_checked(matrix, name)
    return (vectors * np.sqrt(values)) @ vectors.T


def sym_inv(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via eigendecomposition."""
    values, vectors = _eigh_checked(matrix, name)
    return (vectors / values) @ vectors.T


def sym_logdet(matrix: np.ndarray, name: str = "matrix") -> float:
    """Log determinant of a symmetric positive definite matrix via eigendecomposition."""
    values, _ = _eigh_checked(matrix, name)
    return float(np.sum(np.log(values)))


def check_positive_definite(matrix: np.ndarray, name: str = "matrix"):
    """Raise unless `matrix` is symmetric positive definite."""
    _eigh_checked(matrix, name)


class SeparableCovariance:
    """Row and column covariance (sigma_r, sigma_c); cov(vec Y) = sigma_c (x) sigma_r.

    The Kronecker product itself is never formed."""
    sigma_r: np.ndarray
    sigma_c: np.ndarray

    def __init__(self, sigma_r, sigma_c):
        sigma_r = np.array(sigma_r, dtype=float)
        sigma_c = np.array(sigma_c, dtype=float)
        for name, matrix in (("sigma_r", sigma_r), ("sigma_c", sigma_c)):
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise DimensionError(f"{name} must be square, got shape {matrix.shape}.")
            scale = max(np.max(np.abs(matrix)), np.finfo(float).tiny)
            if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOLERANCE * scale:
                raise UserError(f"{name} is not symmetric.")
            check_positive_definite(matrix, name)
        if sigma_r.shape != sigma_c.shape:
            raise DimensionError(
                f"Row and column covariances differ in size: {sigma_r.shape} vs {sigma_c.shape}.")
        self.sigma_r = (sigma_r + sigma_r.T) / 2
        self.sigma_c = (sigma_c + sigma_c.T) / 2

    @property
    def m(self) -> int:
        """Dimension of both covariance matrices."""
        return self.sigma_r.shape[0]

    def __repr__(self):
        return f"SeparableCovariance(m={self.m})"

    @staticmethod
    def identity(m: int) -> "SeparableCovariance":
        """(I, I)"""
        return SeparableCovariance(np.eye(m), np.eye(m))

    @staticmethod
    def exchangeable(m: int, rho_r: float, rho_c: float) -> "SeparableCovariance":
        """Exchangeable row and column correlation: (1 - rho) I + rho 11^t."""
        ones = np.ones((m, m))
        return SeparableCovariance((1 - rho_r) * np.eye(m) + rho_r * ones,
                                   (1 - rho_c) * np.eye(m) + rho_c * ones)

    @staticmethod
    def sparse_pair(m: int, rho: float) -> "SeparableCovariance":
        """Only the first two rows are correlated: sigma_r = I + rho (E12 + E21), sigma_c = I."""
        sigma_r = np.eye(m)
        sigma_r[0, 1] = sigma_r[1, 0] = rho
        return SeparableCovariance(sigma_r, np.eye(m))


class DiagonalCovariance:
    """Diagonal row and column variances (d_r, d_c)."""
    d_r: np.ndarray
    d_c: np.ndarray

    def __init__(self, d_r, d_c):
        d_r = np.array(d_r, dtype=float)
        d_c = np.array(d_c, dtype=float)
        if d_r.ndim != 1 or d_r.shape != d_c.shape:
            raise DimensionError(
                f"Diagonal variances must be vectors of equal length, got {d_r.shape}, "
                f"{d_c.shape}.")
        if not (np.all(d_r > 0) and np.all(d_c > 0)):
            raise NotPositiveDefiniteError("Diagonal variances must be strictly positive.")
        self.d_r = d_r
        self.d_c = d_c

    @property
    def m(self) -> int:
        """Number of nodes."""
        return self.d_r.shape[0]

    def __repr__(self):
        return f"DiagonalCovariance(d_r={self.d_r}, d_c={self.d_c})"

    def normalized(self) -> "DiagonalCovariance":
        """Rescale so that the geometric mean of d_r is 1; the factor moves into d_c."""
        factor = np.exp(np.mean(np.log(self.d_r)))
        return DiagonalCovariance(self.d_r / factor, self.d_c * factor)

    def log_det_kronecker(self) -> float:
        """log|D_c (x) D_r| = m (log|D_r| + log|D_c|)"""
        return float(self.m * (np.sum(np.log(self.d_r)) + np.sum(np.log(self.d_c))))

    def kronecker_diagonal(self) -> np.ndarray:
        """Diagonal of D_c (x) D_r in vec order (column-major), length m^2."""
        return np.kron(self.d_c, self.d_r)

    def to_separable(self) -> SeparableCovariance:
        """The same covariance as a `SeparableCovariance`."""
        return SeparableCovariance(np.diag(self.d_r), np.diag(self.d_c))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, stream_id).

    Streams are derived with `numpy.random.SeedSequence` spawn keys, so the stream for
    Monte Carlo replicate s is the same no matter which worker draws it."""
    seed: int
    stream_id: int = 0
    substream: Tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        """:returns: a fresh generator positioned at the start of this stream."""
        sequence = np.random.SeedSequence(entropy=self.seed,
                                          spawn_key=(self.stream_id,) + self.substream)
        return np.random.default_rng(sequence)

    def child(self, *keys: int) -> "RngStream":
        """:returns: an independent stream nested below this one."""
        return RngStream(self.seed, self.stream_id, self.substream + tuple(keys))


def _standard_normal(m: int, generator: np.random.Generator) -> np.ndarray:
    return generator.standard_normal((m, m))


def _check_dimension(m: int, cov: SeparableCovariance):
    if cov.m != m:
        raise DimensionError(f"Covariance has dimension {cov.m}, expected {m}.")


def sample_matrix_normal(m: int, cov: SeparableCovariance, rng: RngStream) -> RelationalMatrix:
    """Draw Y = sigma_r^{1/2} Z sigma_c^{1/2} with Z i.i.d. standard normal."""
    _check_dimension(m, cov)
    generator = rng.generator()
    return RelationalMatrix(_matrix_normal_draw(m, cov, generator))


def _matrix_normal_draw(m: int, cov: SeparableCovariance,
                        generator: np.random.Generator) -> np.ndarray:
    z = _standard_normal(m, generator)
    return sym_sqrt(cov.sigma_r, "sigma_r") @ z @ sym_sqrt(cov.sigma_c, "sigma_c")


def sample_matrix_t(m: int, cov: SeparableCovariance, dof: float,
                    rng: RngStream) -> RelationalMatrix:
    """Draw a matrix-t variate: a matrix normal draw divided by sqrt(W), W ~ chi2(dof)/dof,
    with one mixing variable per matrix."""
    if not dof > 0:
        raise UserError(f"Degrees of freedom must be positive, got {dof}.")
    _check_dimension(m, cov)
    generator = rng.generator()
    normal = _matrix_normal_draw(m, cov, generator)
    mixing = generator.chisquare(dof) / dof
    return RelationalMatrix(normal / np.sqrt(mixing))


def _check_likelihood_inputs(y: RelationalMatrix, cov: SeparableCovariance):
    if cov.m != y.m:
        raise DimensionError(f"Covariance has dimension {cov.m}, data has {y.m} nodes.")
    y.check_full_rank()


def scaled_log_likelihood(y: RelationalMatrix, cov: SeparableCovariance) -> float:
    """-2 log p(Y | sigma_r, sigma_c) - m^2 log(2 pi)
    = tr[sigma_r^-1 Y sigma_c^-1 Y^t] + m log|sigma_r| + m log|sigma_c|."""
    _check_likelihood_inputs(y, cov)
    inv_r = sym_inv(cov.sigma_r, "sigma_r")
    inv_c = sym_inv(cov.sigma_c, "sigma_c")
    trace = float(np.sum((inv_r @ y.entries @ inv_c) * y.entries))
    return trace + y.m * sym_logdet(cov.sigma_r, "sigma_r") + \
        y.m * sym_logdet(cov.sigma_c, "sigma_c")


def scaled_log_likelihood_diagonal(y: RelationalMatrix, cov: DiagonalCovariance) -> float:
    """Scaled log likelihood for diagonal covariances, O(m^2)."""
    if cov.m != y.m:
        raise DimensionError(f"Covariance has dimension {cov.m}, data has {y.m} nodes.")
    trace = float(np.sum(y.entries ** 2 / np.outer(cov.d_r, cov.d_c)))
    return trace + cov.log_det_kronecker()


def scaled_log_likelihood_replicates(ys: Sequence[RelationalMatrix], cov: SeparableCovariance,
                                     d_obs: Optional[np.ndarray] = None) -> float:
    """Scaled log likelihood of independent Y_i ~ N(0, d_i sigma_r, sigma_c):
    sum_i tr[sigma_r^-1 Y_i sigma_c^-1 Y_i^t] / d_i + pm log|sigma_r| + pm log|sigma_c|
    + m^2 sum_i log d_i."""
    p = len(ys)
    if p == 0:
        raise UserError("At least one observation is required.")
    m = ys[0].m
    d_obs = np.ones(p) if d_obs is None else np.asarray(d_obs, dtype=float)
    if d_obs.shape != (p,) or not np.all(d_obs > 0):
        raise UserError("Replicate scales must be p positive numbers.")
    inv_r = sym_inv(cov.sigma_r, "sigma_r")
    inv_c = sym_inv(cov.sigma_c, "sigma_c")
    trace = 0.0
    for y, d in zip(ys, d_obs):
        _check_likelihood_inputs(y, cov)
        trace += float(np.sum((inv_r @ y.entries @ inv_c) * y.entries)) / d
    return trace + p * m * (sym_logdet(cov.sigma_r, "sigma_r") +
                            sym_logdet(cov.sigma_c, "sigma_c")) + m ** 2 * float(
        np.sum(np.log(d_obs)))
