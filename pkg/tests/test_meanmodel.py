import numpy as np
import pytest
from scipy.stats import ks_2samp

from matlrt.core import RelationalMatrix, RngStream, UserError, DimensionError
from matlrt.lrt import TestSpec, QuantileCache, statistic_replicates
from matlrt.meanmodel import DyadicDesign, ols_demean, trade_workflow, simulate_trade_panel


def random_stack(p: int, m: int, seed: int, diagonal_defined: bool = True):
    generator = np.random.default_rng(seed)
    return [RelationalMatrix(generator.normal(5.0, 1.0, size=(m, m)), diagonal_defined)
            for _ in range(p)]


def test_design_from_node_covariates():
    row = np.arange(6.0).reshape(2, 3, 1)
    design = DyadicDesign.from_node_covariates(2, 3, row=row, col=2 * row,
                                               dyadic=np.ones((2, 3, 3, 2)))
    assert design.names == ["intercept", "row_1", "col_1", "dyad_1", "dyad_2"]
    assert design.covariates.shape == (2, 3, 3, 5)
    assert design.covariates[1, 2, 0, 1] == row[1, 2, 0]
    assert design.covariates[1, 0, 2, 2] == 2 * row[1, 2, 0]


def test_design_validation():
    with pytest.raises(DimensionError):
        DyadicDesign(np.zeros((2, 3, 4, 1)))
    with pytest.raises(UserError):
        DyadicDesign(np.zeros((1, 3, 3, 2)), ["a"])
    with pytest.raises(UserError):
        DyadicDesign(np.full((1, 3, 3, 1), np.inf))


def test_empty_design_is_identity():
    ys = random_stack(2, 4, 1)
    demeaned = ols_demean(ys, DyadicDesign.empty(2, 4))
    for y, e in zip(ys, demeaned.residuals):
        assert np.array_equal(y.entries, e.entries)
    assert demeaned.coefficients() == {}


def test_intercept_only_removes_off_diagonal_mean():
    ys = random_stack(3, 5, 2, diagonal_defined=False)
    demeaned = ols_demean(ys, DyadicDesign.from_node_covariates(3, 5))
    off_diagonal = ~np.eye(5, dtype=bool)
    expected_mean = np.mean([y.entries[off_diagonal] for y in ys])
    assert demeaned.beta_hat[0] == pytest.approx(expected_mean)
    assert np.mean([e.entries[off_diagonal] for e in demeaned.residuals]) == \
        pytest.approx(0.0, abs=1e-10)
    for e in demeaned.residuals:
        assert np.all(np.diag(e.entries) == 0)
        assert not e.diagonal_defined


def test_residuals_orthogonal_to_design():
    ys, design = simulate_trade_panel(8, 3, rng=RngStream(3))
    demeaned = ols_demean(ys, design)
    mask = ~np.eye(8, dtype=bool)
    x = np.concatenate([design.covariates[k][mask] for k in range(3)])
    e = np.concatenate([r.entries[mask] for r in demeaned.residuals])
    assert np.allclose(x.T @ e, 0.0, atol=1e-6)


def test_demeaning_is_idempotent():
    ys, design = simulate_trade_panel(10, 4, rng=RngStream(10))
    once = ols_demean(ys, design).residuals
    twice = ols_demean(once, design).residuals
    for first, second in zip(once, twice):
        assert np.allclose(second.entries, first.entries, rtol=0, atol=1e-10)


def test_coefficients_recovered():
    ys, design = simulate_trade_panel(20, 5, beta=(2.0, -1.0), rng=RngStream(4))
    demeaned = ols_demean(ys, design)
    estimates = demeaned.coefficients()
    for name, truth in (("row_1", 2.0), ("col_1", -1.0)):
        estimate, standard_error = estimates[name]
        assert standard_error > 0
        assert abs(estimate - truth) < 5 * standard_error


def test_ols_demean_validation():
    ys = random_stack(2, 4, 5)
    with pytest.raises(DimensionError):
        ols_demean(ys, DyadicDesign.from_node_covariates(3, 4))
    collinear = np.ones((2, 4, 4, 2))
    with pytest.raises(UserError):
        ols_demean(ys, DyadicDesign(collinear))
    with pytest.raises(UserError):
        ols_demean([], DyadicDesign.empty(1, 4))


def test_simulate_trade_panel_validation():
    with pytest.raises(UserError):
        simulate_trade_panel(5, 2, beta=(1.0,))
    with pytest.raises(UserError):
        simulate_trade_panel(5, 2, d_obs=[1.0, -1.0])
    ys, design = simulate_trade_panel(5, 2, d_obs=[1.0, 4.0])
    assert len(ys) == 2 and design.p == 2
    assert all(not y.diagonal_defined for y in ys)


def test_trade_workflow_uses_heteroscedastic_missing_diagonal_null():
    ys, design = simulate_trade_panel(6, 3, d_obs=[1.0, 2.0, 4.0], rng=RngStream(6))
    result = trade_workflow(ys, design, TestSpec(m=6, p=3, S=100, seed=7))
    assert result.approximate_null
    assert result.spec.missing_diagonal and result.spec.heteroscedastic
    assert 0 < result.p_value <= 1


@pytest.mark.slow
def test_trade_workflow_level(tmp_path):
    spec = TestSpec(m=26, p=13, S=10000, seed=8, missing_diagonal=True, heteroscedastic=True)
    cache = QuantileCache(str(tmp_path))
    rejections = 0
    for rep in range(500):
        ys, design = simulate_trade_panel(26, 13, d_obs=np.linspace(1.0, 3.0, 13),
                                          rng=RngStream(9, rep))
        result = trade_workflow(ys, design, spec, cache, workers=-1)
        rejections += result.reject
    assert 0.03 <= rejections / 500 <= 0.08


def true_errors(ys, design, beta=(2.0, -1.0)):
    """e_ijk = y_ijk - b_1 x_ik - b_2 x_jk for panels from simulate_trade_panel."""
    return [RelationalMatrix(y.entries - beta[0] * design.covariates[k, :, :, 1]
                             - beta[1] * design.covariates[k, :, :, 2], diagonal_defined=False)
            for k, y in enumerate(ys)]


@pytest.mark.slow
def test_residual_statistic_approaches_error_statistic_as_m_grows():
    distances = []
    for m in (10, 20, 40):
        on_residuals, on_errors = [], []
        for rep in range(400):
            ys, design = simulate_trade_panel(m, 3, d_obs=[1.0, 2.0, 3.0], rng=RngStream(31, rep))
            on_residuals.append(statistic_replicates(ols_demean(ys, design).residuals, True))
            on_errors.append(statistic_replicates(true_errors(ys, design), True))
        distances.append(ks_2samp(on_residuals, on_errors).statistic)
    for smaller, larger in zip(distances, distances[1:]):
        assert larger <= smaller + 0.01
    assert distances[-1] < distances[0]


@pytest.mark.slow
def test_trade_workflow_detects_exporter_correlation(tmp_path):
    spec = TestSpec(m=15, p=5, S=1000, seed=32, missing_diagonal=True, heteroscedastic=True)
    cache = QuantileCache(str(tmp_path))
    rejections = 0
    for rep in range(100):
        ys, design = simulate_trade_panel(15, 5, rho=0.5, rng=RngStream(33, rep))
        rejections += trade_workflow(ys, design, spec, cache, workers=-1).reject
    assert rejections / 100 > 0.9
