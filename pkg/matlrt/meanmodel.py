"""Dyadic regression for removing a non-zero mean before testing, and the trade-style pipeline
that tests the residual stack against the missing-diagonal heteroscedastic null."""
import dataclasses
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from matlrt.core import RelationalMatrix, SeparableCovariance, RngStream, UserError, \
    DimensionError, sym_sqrt
from matlrt.lrt import TestSpec, TestResult, QuantileCache, run_test

logger = logging.getLogger(__name__)


class DyadicDesign:
    """Covariates x_ijk for every ordered pair (i, j) and replicate k, stored as a
    (p, m, m, p_x) array."""
    covariates: np.ndarray
    names: List[str]

    def __init__(self, covariates, names: Optional[List[str]] = None):
        array = np.asarray(covariates, dtype=float)
        if array.ndim != 4 or array.shape[1] != array.shape[2]:
            raise DimensionError(f"Design must have shape (p, m, m, p_x), got {array.shape}.")
        if not np.all(np.isfinite(array)):
            raise UserError("Design contains non-finite covariates.")
        self.covariates = array
        self.names = names if names is not None else \
            [f"x_{index + 1}" for index in range(array.shape[3])]
        if len(self.names) != array.shape[3]:
            raise UserError(f"Expected {array.shape[3]} covariate names, got {len(self.names)}.")

    def __repr__(self):
        return f"DyadicDesign(p={self.p}, m={self.m}, names={self.names})"

    @property
    def p(self) -> int:
        """Number of replicates."""
        return self.covariates.shape[0]

    @property
    def m(self) -> int:
        """Number of nodes."""
        return self.covariates.shape[1]

    @property
    def n_covariates(self) -> int:
        """Number of regression coefficients."""
        return self.covariates.shape[3]

    @staticmethod
    def empty(p: int, m: int) -> "DyadicDesign":
        """:returns: a design without covariates, for which demeaning is the identity."""
        return DyadicDesign(np.zeros((p, m, m, 0)), [])

    # pylint: disable=too-many-arguments
    @staticmethod
    def from_node_covariates(p: int, m: int, row: Optional[np.ndarray] = None,
                             col: Optional[np.ndarray] = None,
                             dyadic: Optional[np.ndarray] = None,
                             intercept: bool = True) -> "DyadicDesign":
        """Build x_ijk = (1, row_ik, col_jk, dyadic_ijk).
        :param row: sender features, shape (p, m, r)
        :param col: receiver features, shape (p, m, c)
        :param dyadic: pair features, shape (p, m, m, d)
        :param intercept: whether to include a constant column
        """
        blocks = []
        names: List[str] = []
        if intercept:
            blocks.append(np.ones((p, m, m, 1)))
            names.append("intercept")
        if row is not None:
            row = np.asarray(row, dtype=float).reshape(p, m, -1)
            blocks.append(np.broadcast_to(row[:, :, None, :], (p, m, m, row.shape[2])))
            names += [f"row_{index + 1}" for index in range(row.shape[2])]
        if col is not None:
            col = np.asarray(col, dtype=float).reshape(p, m, -1)
            blocks.append(np.broadcast_to(col[:, None, :, :], (p, m, m, col.shape[2])))
            names += [f"col_{index + 1}" for index in range(col.shape[2])]
        if dyadic is not None:
            dyadic = np.asarray(dyadic, dtype=float).reshape(p, m, m, -1)
            blocks.append(dyadic)
            names += [f"dyad_{index + 1}" for index in range(dyadic.shape[3])]
        if not blocks:
            return DyadicDesign.empty(p, m)
        return DyadicDesign(np.concatenate(blocks, axis=3), names)


# pylint: disable=too-few-public-methods
class ResidualStack:
    """OLS residual matrices E_k together with beta_hat and its standard errors."""
    residuals: List[RelationalMatrix]
    beta_hat: np.ndarray
    standard_errors: np.ndarray
    names: List[str]

    def __init__(self, residuals: List[RelationalMatrix], beta_hat: np.ndarray,
                 standard_errors: np.ndarray, names: List[str]):
        self.residuals = residuals
        self.beta_hat = beta_hat
        self.standard_errors = standard_errors
        self.names = names

    def __repr__(self):
        return f"ResidualStack(p={len(self.residuals)}, beta_hat={self.beta_hat})"

    def coefficients(self) -> dict:
        """:returns: {name: (estimate, standard error)}"""
        return {name: (float(beta), float(se))
                for name, beta, se in zip(self.names, self.beta_hat, self.standard_errors)}


def _observed_mask(ys: Sequence[RelationalMatrix]) -> np.ndarray:
    """(p, m, m) mask of entries that enter the regression; undefined diagonals do not."""
    m = ys[0].m
    mask = np.ones((len(ys), m, m), dtype=bool)
    for k, y in enumerate(ys):
        if not y.diagonal_defined:
            np.fill_diagonal(mask[k], False)
    return mask


def ols_demean(ys: Sequence[RelationalMatrix], design: DyadicDesign) -> ResidualStack:
    """Regress vec(Y) on the design by OLS and return the residual matrices.

    Undefined diagonal entries are left out of the regression and stay zero in the residuals."""
    if len(ys) == 0:
        raise UserError("At least one observation is required.")
    if len(ys) != design.p or any(y.m != design.m for y in ys):
        raise DimensionError(f"Design is for p={design.p}, m={design.m}; data has "
                             f"p={len(ys)}, m={ys[0].m}.")
    stack = np.stack([y.entries for y in ys])
    mask = _observed_mask(ys)
    n_covariates = design.n_covariates
    if n_covariates == 0:
        return ResidualStack([RelationalMatrix(y.entries, y.diagonal_defined) for y in ys],
                             np.zeros(0), np.zeros(0), [])
    x = design.covariates[mask]
    response = stack[mask]
    if np.linalg.matrix_rank(x) < n_covariates:
        raise UserError("Design matrix does not have full column rank.")
    if len(response) <= n_covariates:
        raise UserError("Not enough observations for the number of covariates.")
    beta, _, _, _ = np.linalg.lstsq(x, response, rcond=None)
    fitted = response - x @ beta
    residual_array = np.zeros_like(stack)
    residual_array[mask] = fitted
    sigma2 = float(fitted @ fitted) / (len(response) - n_covariates)
    standard_errors = np.sqrt(sigma2 * np.diag(np.linalg.inv(x.T @ x)))
    logger.debug("OLS fit with %d observations and %d covariates.", len(response), n_covariates)
    residuals = [RelationalMatrix(residual_array[k], ys[k].diagonal_defined)
                 for k in range(len(ys))]
    return ResidualStack(residuals, beta, standard_errors, list(design.names))


# pylint: disable=too-many-arguments
def trade_workflow(ys: Sequence[RelationalMatrix], design: DyadicDesign, spec: TestSpec,
                   cache: Optional[QuantileCache] = None, workers: int = 1,
                   level: float = 0.05) -> TestResult:
    """Demean the panel, zero the diagonals and test the residual stack with the heteroscedastic
    replicate statistic against the missing-diagonal null.

    The reference distribution is only approximately valid for residuals; the result is
    flagged accordingly."""
    if not (spec.missing_diagonal and spec.heteroscedastic):
        logger.info("Using the missing-diagonal heteroscedastic null for residual data.")
        spec = dataclasses.replace(spec, missing_diagonal=True, heteroscedastic=True)
    residuals = ols_demean(ys, design).residuals
    return run_test([e.zero_filled() for e in residuals], spec, cache, workers, level,
                    approximate_null=True)


# pylint: disable=too-many-arguments,too-many-locals
def simulate_trade_panel(m: int, p: int, beta: Sequence[float] = (2.0, -1.0), rho: float = 0.0,
                         d_obs: Optional[Sequence[float]] = None,
                         rng: RngStream = RngStream(0)
                         ) -> Tuple[List[RelationalMatrix], DyadicDesign]:
    """Synthetic panel Y_ijk = b_1 x_ik + b_2 x_jk + e_ijk with growth-style node covariates
    (log-size level plus a yearly trend) and errors e_k ~ N(0, d_k S_r, I), where S_r has
    exchangeable exporter correlation `rho`. Diagonals are undefined.
    :returns: (observations, design with intercept, sender and receiver covariate)"""
    if len(beta) != 2:
        raise UserError("beta holds one sender and one receiver coefficient.")
    scales = np.ones(p) if d_obs is None else np.asarray(d_obs, dtype=float)
    if scales.shape != (p,) or not np.all(scales > 0):
        raise UserError("Replicate scales must be p positive numbers.")
    generator = rng.generator()
    level = generator.normal(10.0, 1.0, size=m)
    trend = generator.normal(0.03, 0.01, size=m)
    years = np.arange(p)
    node = level[None, :] + trend[None, :] * years[:, None] + \
        generator.normal(0.0, 0.05, size=(p, m))
    sqrt_r = sym_sqrt(SeparableCovariance.exchangeable(m, rho, 0.0).sigma_r, "sigma_r")
    ys = []
    for k in range(p):
        errors = np.sqrt(scales[k]) * sqrt_r @ generator.standard_normal((m, m))
        mean = beta[0] * node[k][:, None] + beta[1] * node[k][None, :]
        ys.append(RelationalMatrix(mean + errors, diagonal_defined=False))
    design = DyadicDesign.from_node_covariates(p, m, row=node[:, :, None], col=node[:, :, None])
    return ys, design
