"""Maximum likelihood estimation under the full Kronecker covariance model and under the
Kronecker variance (diagonal) null model, for single matrices and replicate stacks."""
import logging
from typing import List, Optional, Sequence, Union

import numpy as np

from matlrt.core import RelationalMatrix, SeparableCovariance, DiagonalCovariance, \
    UserError, DimensionError, sym_inv, sym_logdet, check_positive_definite

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_PARAM_TOL = 1e-9
DEFAULT_MAX_ITER = 1000


# pylint: disable=too-few-public-methods
class NullFitResult:
    """MLE (D_r, D_c) under the null model, normalized so that the geometric mean of d_r is 1."""
    d: DiagonalCovariance
    scaled_loglik: float
    iterations: int
    converged: bool
    history: List[float]

    # pylint: disable=too-many-arguments
    def __init__(self, d: DiagonalCovariance, scaled_loglik: float, iterations: int,
                 converged: bool, history: Optional[List[float]] = None):
        self.d = d
        self.scaled_loglik = scaled_loglik
        self.iterations = iterations
        self.converged = converged
        self.history = history if history is not None else []

    def __repr__(self):
        return f"NullFitResult(scaled_loglik={self.scaled_loglik}, " \
               f"iterations={self.iterations}, converged={self.converged})"


# pylint: disable=too-few-public-methods
class FullFitResult:
    """One representative of the (non-unique) unrestricted MLE."""
    cov: SeparableCovariance
    scaled_loglik: float

    def __init__(self, cov: SeparableCovariance, scaled_loglik: float):
        self.cov = cov
        self.scaled_loglik = scaled_loglik

    def __repr__(self):
        return f"FullFitResult(scaled_loglik={self.scaled_loglik})"


# pylint: disable=too-few-public-methods
class HeteroFitResult:
    """Fit for a replicate stack Y_i ~ N(0, d_i sigma_r, sigma_c).

    Normalized so that d_obs[0] = 1 and log|sigma_r| = 0."""
    d_obs: np.ndarray
    cov: Union[SeparableCovariance, DiagonalCovariance]
    scaled_loglik: float
    iterations: int
    converged: bool
    history: List[float]

    # pylint: disable=too-many-arguments
    def __init__(self, d_obs: np.ndarray, cov: Union[SeparableCovariance, DiagonalCovariance],
                 scaled_loglik: float, iterations: int, converged: bool,
                 history: Optional[List[float]] = None):
        self.d_obs = d_obs
        self.cov = cov
        self.scaled_loglik = scaled_loglik
        self.iterations = iterations
        self.converged = converged
        self.history = history if history is not None else []

    def __repr__(self):
        return f"HeteroFitResult(d_obs={self.d_obs}, scaled_loglik={self.scaled_loglik}, " \
               f"iterations={self.iterations}, converged={self.converged})"


def log_det_gram(y: RelationalMatrix) -> float:
    """log|Y Y^t / m|"""
    _, logabsdet = np.linalg.slogdet(y.entries)
    return 2 * float(logabsdet) - y.m * np.log(y.m)


def fit_full(y: RelationalMatrix) -> FullFitResult:
    """Canonical unrestricted MLE (Y Y^t / m, I).

    Any (Y S^-1 Y^t / m, S) with S positive definite attains the same scaled log likelihood
    m^2 + m log|Y Y^t / m|."""
    y.check_full_rank()
    m = y.m
    sigma_r = y.entries @ y.entries.T / m
    return FullFitResult(SeparableCovariance(sigma_r, np.eye(m)),
                         m ** 2 + m * log_det_gram(y))


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / np.abs(old)))


def _converged(loss: float, previous: float, change: float, tol: float,
               param_tol: float) -> bool:
    return (previous - loss) / max(abs(loss), 1.0) < tol and change < param_tol


def _stack(ys: Sequence[RelationalMatrix]) -> np.ndarray:
    if len(ys) == 0:
        raise UserError("At least one observation is required.")
    m = ys[0].m
    for y in ys:
        if y.m != m:
            raise DimensionError(f"All observations must share m={m}, got {y.m}.")
        y.check_full_rank()
    return np.stack([y.entries for y in ys])


def _normalize_diagonal(d_r: np.ndarray, d_c: np.ndarray, d_obs: np.ndarray):
    """d_obs[0] = 1 and geometric mean of d_r = 1; factors are absorbed into d_c."""
    d_c = d_c * d_obs[0]
    d_obs = d_obs / d_obs[0]
    factor = np.exp(np.mean(np.log(d_r)))
    return d_r / factor, d_c * factor, d_obs


# pylint: disable=too-many-arguments,too-many-locals
def _fit_diagonal_stack(squares: np.ndarray, heteroscedastic: bool, tol: float, max_iter: int,
                        param_tol: float, initial_d_c: Optional[np.ndarray] = None):
    """Block coordinate descent on the diagonal likelihood equations
        mp D_r = sum_i Y_i D_c^-1 Y_i^t o I / d_i
        mp D_c = sum_i Y_i^t D_r^-1 Y_i o I / d_i
        m^2 d_i = tr(Y_i D_c^-1 Y_i^t D_r^-1)
    where `squares` holds the entrywise squared observations."""
    p, m, _ = squares.shape
    d_c = np.ones(m) if initial_d_c is None else np.array(initial_d_c, dtype=float)
    d_obs = np.ones(p)
    d_r = np.ones(m)
    history: List[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        old = np.concatenate([d_r, d_c, d_obs])
        d_r = np.einsum("ijk,k,i->j", squares, 1 / d_c, 1 / d_obs) / (m * p)
        d_c = np.einsum("ijk,j,i->k", squares, 1 / d_r, 1 / d_obs) / (m * p)
        if heteroscedastic:
            d_obs = np.einsum("ijk,j,k->i", squares, 1 / d_r, 1 / d_c) / m ** 2
        d_r, d_c, d_obs = _normalize_diagonal(d_r, d_c, d_obs)
        trace = float(np.einsum("ijk,j,k,i->", squares, 1 / d_r, 1 / d_c, 1 / d_obs))
        loss = trace + p * m * float(np.sum(np.log(d_r)) + np.sum(np.log(d_c))) + \
            m ** 2 * float(np.sum(np.log(d_obs)))
        change = _relative_change(np.concatenate([d_r, d_c, d_obs]), old)
        if history and _converged(loss, history[-1], change, tol, param_tol):
            history.append(loss)
            converged = True
            break
        history.append(loss)
    if not converged:
        logger.warning("Null model fit did not converge within %d iterations.", max_iter)
    logger.debug("Null model fit finished after %d iterations.", iteration)
    return DiagonalCovariance(d_r, d_c), d_obs, history, iteration, converged


# pylint: disable=too-many-arguments
def fit_null(y: RelationalMatrix, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             param_tol: float = DEFAULT_PARAM_TOL,
             initial_d_c: Optional[np.ndarray] = None) -> NullFitResult:
    """MLE under the null by alternating D_r <- (Y D_c^-1 Y^t o I)/m and
    D_c <- (Y^t D_r^-1 Y o I)/m, starting from D_c = I unless `initial_d_c` is given.

    A zero-filled diagonal takes part in the equations as data.
    :param tol: relative decrease of the scaled log likelihood below which iteration stops
    :param param_tol: maximal relative change of the variances below which iteration stops
    """
    y.check_full_rank()
    if initial_d_c is not None and (np.shape(initial_d_c) != (y.m,) or
                                    not np.all(np.asarray(initial_d_c) > 0)):
        raise UserError("Initial column variances must be m positive numbers.")
    d, _, history, iterations, converged = _fit_diagonal_stack(
        (y.entries ** 2)[None, :, :], False, tol, max_iter, param_tol, initial_d_c)
    return NullFitResult(d, history[-1], iterations, converged, history)


def fit_null_replicates(ys: Sequence[RelationalMatrix], heteroscedastic: bool = False,
                        tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                        param_tol: float = DEFAULT_PARAM_TOL) -> HeteroFitResult:
    """Null model MLE for a replicate stack, optionally with per-replicate scales d_i."""
    squares = _stack(ys) ** 2
    d, d_obs, history, iterations, converged = _fit_diagonal_stack(
        squares, heteroscedastic, tol, max_iter, param_tol)
    return HeteroFitResult(d_obs, d, history[-1], iterations, converged, history)


def _normalize_full(sigma_r: np.ndarray, sigma_c: np.ndarray, d_obs: np.ndarray):
    """d_obs[0] = 1 and log|sigma_r| = 0; factors are absorbed into sigma_c."""
    sigma_c = sigma_c * d_obs[0]
    d_obs = d_obs / d_obs[0]
    factor = np.exp(sym_logdet(sigma_r, "sigma_r") / sigma_r.shape[0])
    return sigma_r / factor, sigma_c * factor, d_obs


def flip_residual(ys: Sequence[RelationalMatrix], fit: HeteroFitResult) -> float:
    """Relative residual ||mp sigma_r - sum_i Y_i sigma_c^-1 Y_i^t / d_i|| / ||sigma_r||
    of the row flip equation at a fitted point."""
    cov = fit.cov if isinstance(fit.cov, SeparableCovariance) else fit.cov.to_separable()
    stack = _stack(ys)
    p, m, _ = stack.shape
    inv_c = sym_inv(cov.sigma_c, "sigma_c")
    rhs = np.einsum("ijk,kl,iml,i->jm", stack, inv_c, stack, 1 / fit.d_obs)
    return float(np.linalg.norm(m * p * cov.sigma_r - rhs) / np.linalg.norm(cov.sigma_r))


# pylint: disable=too-many-locals
def fit_full_replicates(ys: Sequence[RelationalMatrix], heteroscedastic: bool = False,
                        tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                        param_tol: float = DEFAULT_PARAM_TOL) -> HeteroFitResult:
    """Unrestricted fit for a replicate stack.

    For a single matrix the closed form (Y Y^t / m, I) is returned. Otherwise the flip-flop
    iteration on
        mp sigma_r = sum_i Y_i sigma_c^-1 Y_i^t / d_i
        mp sigma_c = sum_i Y_i^t sigma_r^-1 Y_i / d_i
        m^2 d_i = tr(Y_i sigma_c^-1 Y_i^t sigma_r^-1)   (heteroscedastic only)
    runs from sigma_c = I to a stationary point; no global optimality is claimed."""
    stack = _stack(ys)
    p, m, _ = stack.shape
    if p == 1:
        fit = fit_full(ys[0])
        sigma_r, sigma_c, d_obs = _normalize_full(fit.cov.sigma_r, fit.cov.sigma_c, np.ones(1))
        return HeteroFitResult(d_obs, SeparableCovariance(sigma_r, sigma_c), fit.scaled_loglik,
                               0, True, [fit.scaled_loglik])
    sigma_c = np.eye(m)
    sigma_r = np.eye(m)
    d_obs = np.ones(p)
    history: List[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        old_r, old_c, old_d = sigma_r, sigma_c, d_obs
        inv_c = sym_inv(sigma_c, "sigma_c")
        sigma_r = np.einsum("ijk,kl,iml,i->jm", stack, inv_c, stack, 1 / d_obs) / (m * p)
        check_positive_definite(sigma_r, "sigma_r")
        inv_r = sym_inv(sigma_r, "sigma_r")
        sigma_c = np.einsum("ijk,jl,ilm,i->km", stack, inv_r, stack, 1 / d_obs) / (m * p)
        check_positive_definite(sigma_c, "sigma_c")
        inv_c = sym_inv(sigma_c, "sigma_c")
        quadratic = np.einsum("jk,ikl,lm,ijm->i", inv_r, stack, inv_c, stack)
        if heteroscedastic:
            d_obs = quadratic / m ** 2
        sigma_r, sigma_c, d_obs = _normalize_full(sigma_r, sigma_c, d_obs)
        loss = float(np.sum(_quadratic_forms(stack, sigma_r, sigma_c) / d_obs)) + p * m * (
            sym_logdet(sigma_r, "sigma_r") + sym_logdet(sigma_c, "sigma_c")) + \
            m ** 2 * float(np.sum(np.log(d_obs)))
        change = max(
            float(np.linalg.norm(sigma_r - old_r) / np.linalg.norm(old_r)),
            float(np.linalg.norm(sigma_c - old_c) / np.linalg.norm(old_c)),
            _relative_change(d_obs, old_d))
        if history and _converged(loss, history[-1], change, tol, param_tol):
            history.append(loss)
            converged = True
            break
        history.append(loss)
    if not converged:
        logger.warning("Full model fit did not converge within %d iterations.", max_iter)
    logger.debug("Full model fit finished after %d iterations.", iteration)
    return HeteroFitResult(d_obs, SeparableCovariance(sigma_r, sigma_c), history[-1], iteration,
                           converged, history)


def _quadratic_forms(stack: np.ndarray, sigma_r: np.ndarray, sigma_c: np.ndarray) -> np.ndarray:
    """tr(sigma_r^-1 Y_i sigma_c^-1 Y_i^t) for every replicate."""
    inv_r = sym_inv(sigma_r, "sigma_r")
    inv_c = sym_inv(sigma_c, "sigma_c")
    return np.einsum("jk,ikl,lm,ijm->i", inv_r, stack, inv_c, stack)


def row_column_correlations(ys: Sequence[RelationalMatrix]):
    """Moment estimates of the row and column correlation matrices of a replicate stack.
    :returns: (row correlation, column correlation)"""
    stack = _stack(ys)
    row_cov = np.einsum("ijk,ilk->jl", stack, stack)
    col_cov = np.einsum("ijk,ijl->kl", stack, stack)
    row_scale = np.sqrt(np.diag(row_cov))
    col_scale = np.sqrt(np.diag(col_cov))
    return row_cov / np.outer(row_scale, row_scale), col_cov / np.outer(col_scale, col_scale)
