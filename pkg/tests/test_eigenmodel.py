import numpy as np
import pytest
from scipy.stats import norm

from matlrt.core import RngStream, UserError, DimensionError
from matlrt.eigenmodel import (
    BinaryNetwork,
    FuzzyPValueSample,
    FuzzyPValueStudy,
    fixed_gamma,
    fuzzy_p_values,
    gibbs_fit,
    simulate_network,
)
from matlrt.lrt import TestSpec, null_distribution, p_value, statistic
from matlrt.simulation import read_study_csv, read_study_metadata


@pytest.fixture
def network():
    net, _ = simulate_network(8, 1, 0.3, RngStream(1), diagonal_meaningful=False)
    return net


def test_binary_network_validation():
    with pytest.raises(DimensionError):
        BinaryNetwork(np.zeros((2, 3)))
    with pytest.raises(UserError):
        BinaryNetwork([[0, 2], [1, 0]])
    net = BinaryNetwork([[1, 1], [0, 1]])
    assert net.density == 0.75
    assert BinaryNetwork([[1, 1], [0, 1]], diagonal_meaningful=False).density == 0.5


def test_fixed_gamma_matches_density():
    net = BinaryNetwork([[0, 1, 0], [0, 0, 1], [1, 1, 0]], diagonal_meaningful=False)
    assert fixed_gamma(net) == pytest.approx(norm.ppf(1 - 4 / 6))
    with pytest.raises(UserError):
        fixed_gamma(BinaryNetwork(np.zeros((3, 3), dtype=int)))


def test_simulate_network_density():
    net, planted = simulate_network(30, 2, 0.2, RngStream(2))
    assert planted.shape == (30, 30)
    assert np.linalg.matrix_rank(planted) == 2
    assert net.density == pytest.approx(0.2, abs=0.01)
    with pytest.raises(UserError):
        simulate_network(5, 1, 1.0, RngStream(3))


def test_gibbs_fit_thinning(network):
    seen = []
    states = gibbs_fit(network, 1, n_iter=60, burn_in=20, thin=10, rng=RngStream(4),
                       callback=lambda iteration, state: seen.append(iteration))
    assert [state.iteration for state in states] == [30, 40, 50, 60]
    assert seen == list(range(1, 61))


def test_gibbs_fit_latent_respects_ties_after_every_sweep(network):
    mask = network.observed_mask()
    ties = (network.a == 1) & mask
    non_ties = (network.a == 0) & mask
    sweeps = []

    def check(iteration, state):
        assert np.all(state.y[ties] > state.gamma), iteration
        assert np.all(state.y[non_ties] <= state.gamma), iteration
        assert np.all(np.isfinite(state.y))
        sweeps.append(iteration)
    gibbs_fit(network, 1, n_iter=30, burn_in=10, thin=10, rng=RngStream(5), callback=check)
    assert len(sweeps) == 30


def test_gibbs_fit_fixed_gamma(network):
    states = gibbs_fit(network, 2, n_iter=20, burn_in=10, thin=1, rng=RngStream(6),
                       fix_gamma=True)
    assert {state.gamma for state in states} == {fixed_gamma(network)}
    assert states[0].u.shape == (8, 2)


def test_gibbs_fit_rank_zero_residual_is_latent(network):
    state = gibbs_fit(network, 0, n_iter=5, burn_in=0, thin=1, rng=RngStream(7))[-1]
    assert np.array_equal(state.residual().entries, state.y)


def test_gibbs_fit_reproducible(network):
    first = gibbs_fit(network, 1, n_iter=15, burn_in=5, thin=5, rng=RngStream(8))
    second = gibbs_fit(network, 1, n_iter=15, burn_in=5, thin=5, rng=RngStream(8))
    for a, b in zip(first, second):
        assert np.array_equal(a.y, b.y)
        assert a.gamma == b.gamma


def test_gibbs_fit_validation(network):
    with pytest.raises(UserError):
        gibbs_fit(network, 8, n_iter=10, burn_in=5)
    with pytest.raises(UserError):
        gibbs_fit(network, 1, n_iter=10, burn_in=10)
    with pytest.raises(UserError):
        gibbs_fit(network, 1, n_iter=10, burn_in=5, thin=0)
    with pytest.raises(UserError):
        gibbs_fit(network, 1, n_iter=10, burn_in=5, prior_variance=0.0)


def test_fuzzy_p_values(network):
    states = gibbs_fit(network, 1, n_iter=20, burn_in=10, thin=2, rng=RngStream(9))
    spec = TestSpec(m=8, S=100, seed=10, missing_diagonal=True)
    sample = fuzzy_p_values(states, spec)
    assert sample.iterations.tolist() == [12, 14, 16, 18, 20]
    assert np.all((sample.p_values > 0) & (sample.p_values <= 1))
    assert len(sample.draws) == 5
    parallel = fuzzy_p_values(states, spec, workers=2)
    assert np.array_equal(parallel.statistics, sample.statistics)
    with pytest.raises(DimensionError):
        fuzzy_p_values(states, TestSpec(m=9, S=100))
    with pytest.raises(UserError):
        fuzzy_p_values(states, TestSpec(m=8, p=2, S=100))
    with pytest.raises(UserError):
        fuzzy_p_values([], spec)


def test_fuzzy_p_value_sample_fraction_below():
    sample = FuzzyPValueSample([1, 2, 3, 4], [5.0, 1.0, 2.0, 0.5], [0.01, 0.2, 0.04, 0.9])
    assert sample.fraction_below(0.05) == 0.5
    assert sample.draws[0] == (5.0, 0.01)


def test_fuzzy_p_value_study_writes_one_row_per_retained_state(tmp_path, network):
    spec = TestSpec(m=8, S=100, seed=11, missing_diagonal=True)
    study = FuzzyPValueStudy(str(tmp_path), "fuzzy", network, 1, spec, n_iter=40, burn_in=20,
                             thin=1)
    study.simulate()
    path = study.write_csv()
    table = read_study_csv(path)
    assert list(table.columns) == ["iteration", "statistic", "p_value"]
    assert table["iteration"].tolist() == list(range(21, 41))
    assert read_study_metadata(path)["rank"] == "1"


@pytest.mark.slow
def test_factors_absorb_planted_dependence():
    net, _ = simulate_network(20, 2, 0.3, RngStream(12), scale=2.0)
    spec = TestSpec(m=20, S=500, seed=13)
    medians = []
    for rank in (0, 2):
        states = gibbs_fit(net, rank, n_iter=600, burn_in=300, thin=10, rng=RngStream(14))
        medians.append(np.median(fuzzy_p_values(states, spec, workers=-1).statistics))
    assert medians[1] < medians[0]


def test_single_state_gives_ordinary_p_value(network):
    state = gibbs_fit(network, 1, n_iter=3, burn_in=2, thin=1, rng=RngStream(15))[0]
    spec = TestSpec(m=8, S=100, seed=16)
    sample = fuzzy_p_values([state], spec)
    expected = p_value(null_distribution(spec), statistic(state.residual()))
    assert sample.p_values.tolist() == [expected]


def test_rank_zero_posterior_mean_follows_ties(network):
    states = gibbs_fit(network, 0, n_iter=200, burn_in=100, thin=1, rng=RngStream(17),
                       fix_gamma=True)
    mean = np.mean([state.y for state in states], axis=0)
    mask = network.observed_mask()
    assert np.array_equal(np.sign(mean - fixed_gamma(network))[mask],
                          (2 * network.a - 1)[mask])


@pytest.mark.slow
def test_rank_zero_latent_draws_are_uncorrelated_across_sweeps():
    net, _ = simulate_network(10, 0, 0.5, RngStream(18))
    states = gibbs_fit(net, 0, n_iter=5000, burn_in=0, thin=1, rng=RngStream(19),
                       fix_gamma=True)
    trace = np.array([state.y[0, 1] for state in states])
    centered = trace - trace.mean()
    assert abs(np.dot(centered[1:], centered[:-1]) / np.dot(centered, centered)) < 0.05


@pytest.mark.slow
def test_planted_rank_one_recovery():
    net, planted = simulate_network(40, 1, 0.1, RngStream(20), scale=1.5)
    states = gibbs_fit(net, 1, n_iter=3000, burn_in=1000, thin=10, rng=RngStream(21))
    posterior_mean = np.mean([state.u @ state.v.T for state in states], axis=0)
    assert np.corrcoef(posterior_mean.ravel(), planted.ravel())[0, 1] > 0.5


@pytest.mark.slow
def test_fuzzy_p_values_concentrate_only_when_under_ranked():
    net, _ = simulate_network(30, 1, 0.3, RngStream(22), scale=2.0)
    spec = TestSpec(m=30, S=1000, seed=23)
    under = gibbs_fit(net, 0, n_iter=2000, burn_in=1000, thin=10, rng=RngStream(24))
    matched = gibbs_fit(net, 1, n_iter=2000, burn_in=1000, thin=10, rng=RngStream(24))
    assert fuzzy_p_values(under, spec, workers=-1).fraction_below(0.05) > 0.9
    assert fuzzy_p_values(matched, spec, workers=-1).fraction_below(0.05) < 0.5


@pytest.mark.slow
def test_random_graph_gives_spread_out_fuzzy_p_values():
    net, _ = simulate_network(50, 0, 0.2, RngStream(25))
    spec = TestSpec(m=50, S=1000, seed=26)
    states = gibbs_fit(net, 0, n_iter=10000, burn_in=5000, thin=25, rng=RngStream(27))
    sample = fuzzy_p_values(states, spec, workers=-1)
    assert len(states) == 200
    assert 0.2 <= np.mean(sample.p_values > 0.5) <= 0.8
