from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_params, stacked_one_day_cov, stationary_cov_by_iteration
from staggered_dfm.model import (
    InvalidParameterError,
    ModelParams,
    PanelLayout,
    ReturnPanel,
    build_state_space,
    build_two_day,
    factor_cov,
    implied_covariance,
    interpretation_scalars,
    loading_columns,
    simulate,
    stack_two_day,
    standardize_returns,
    stationary_state_cov,
    variance_decomposition,
)
from staggered_dfm.model import DegenerateSeriesError


def test_layout_rejects_bad_length():
    with pytest.raises(ValueError):
        PanelLayout(3, 20)
    lay = PanelLayout(3, 30)
    assert lay.n_blocks == 5
    assert lay.continent_of_period(1) == "A"
    assert lay.continent_of_period(5) == "E"
    assert lay.continent_of_period(30) == "U"
    assert np.array_equal(lay.periods_of("U"), np.arange(2, 30, 3))


def test_params_validation():
    z = np.zeros((3, 2, 4))
    with pytest.raises(InvalidParameterError):
        ModelParams(1.0, z, np.ones((3, 2)))
    with pytest.raises(InvalidParameterError):
        ModelParams(0.2, z, -np.ones((3, 2)))
    with pytest.raises(InvalidParameterError):
        ModelParams(0.2, np.zeros((3, 2, 3)), np.ones((3, 2)))
    p = ModelParams(0.2, z, np.ones((3, 2)))
    assert np.allclose(ModelParams.from_vector(p.to_vector(), 2).to_vector(), p.to_vector())


def test_stationary_cov_matches_iteration():
    for phi in (-0.8, 0.0, 0.3, 0.95):
        assert np.allclose(stationary_state_cov(phi), stationary_cov_by_iteration(phi), atol=1e-10)


def test_stationary_cov_entries():
    v = stationary_state_cov(0.5)
    assert np.isclose(v[0, 0], 1 / 0.75)
    assert np.isclose(v[0, 1], 0.5 / 0.75)
    assert np.isclose(v[0, 2], 0.25 / 0.75)
    assert np.isclose(v[3, 3], 1.0)
    assert np.isclose(v[0, 3], 0.0)


def test_state_space_cycles_continents(rng):
    p = random_params(rng, 3)
    sys = build_state_space(p)
    for t in range(1, 10):
        assert np.array_equal(sys.obs_matrix_of_period(t), p.loadings[(t - 1) % 3])


def test_loading_block_pattern():
    z = np.zeros((3, 5, 4))
    z[0, 0] = (1, 0, 0, 0)
    td = build_two_day(ModelParams(0.3, z, np.ones((3, 5))))
    # Asia's first asset in day-blocks 1 and 4
    assert np.flatnonzero(td.Lambda[0]).tolist() == [5]
    assert np.flatnonzero(td.Lambda[15]).tolist() == [2]
    assert loading_columns(1) == (5, 6, 7, 13)
    assert loading_columns(6) == (0, 1, 2, 8)


def test_factor_cov_structure():
    m = factor_cov(0.3)
    assert np.isclose(m[0, 1], 0.3 / 0.91)
    assert np.allclose(m[8:, 8:], np.eye(6))
    assert np.allclose(m[:8, 8:], 0.0)
    assert np.allclose(factor_cov(0.0), np.eye(14))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 4))
def test_two_day_covariance_equals_stacked_one_day(seed, n):
    p = random_params(np.random.default_rng(seed), n)
    assert np.abs(implied_covariance(build_two_day(p)) - stacked_one_day_cov(p)).max() < 1e-10


def test_variance_decomposition_example():
    z = np.zeros((3, 1, 4))
    z[:, 0] = (1, 1, 0, 0)
    p = ModelParams(0.3, z, 0.5 * np.ones((3, 1)))
    dec = variance_decomposition(p)
    assert np.allclose(dec.var_global, 2.6 / 0.91)
    assert np.allclose(dec.var_continental, 0.0)
    total = 2.6 / 0.91 + 0.5
    assert np.allclose(dec.shares()["global"], 2.6 / (0.91 * total))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_decomposition_sums_to_model_variance(seed):
    p = random_params(np.random.default_rng(seed), 3)
    dec = variance_decomposition(p)
    var = np.diag(stacked_one_day_cov(p))[: 3 * 3].reshape(3, 3)
    assert np.allclose(dec.total, var, atol=1e-12)
    sh = dec.shares()
    assert np.allclose(sh["global"] + sh["continental"] + sh["idiosyncratic"], 1.0)


def test_interpretation_scalars():
    z = np.ones((3, 2, 4))
    p = ModelParams(0.6, z, np.ones((3, 2)))
    out = interpretation_scalars(p)
    assert np.allclose(out[..., :3], 1 / 0.8)
    assert np.allclose(out[..., 3], 1.0)


def test_simulate_is_deterministic_and_stacks(rng):
    p = random_params(rng, 2)
    a, fg, _ = simulate(p, PanelLayout(2, 60), 7)
    b, _, _ = simulate(p, PanelLayout(2, 60), 7)
    assert np.array_equal(a.values, b.values)
    assert stack_two_day(a).shape == (10, 12)
    assert fg.shape == (60,)


def test_simulated_moments_match_model():
    rng = np.random.default_rng(1)
    p = random_params(rng, 2, phi_max=0.5)
    panel, _, _ = simulate(p, PanelLayout(2, 60000), 3)
    y = stack_two_day(panel)
    emp = y.T @ y / len(y)
    assert np.abs(emp - implied_covariance(build_two_day(p))).max() < 0.15 * np.abs(emp).max()


def test_standardize_and_degenerate():
    vals = np.random.default_rng(0).normal(size=(12, 2))
    out, mu, sd = standardize_returns(ReturnPanel.complete(vals))
    assert np.allclose(out.values[0::3].mean(axis=0), 0.0)
    vals[0::3, 1] = 1.0
    with pytest.raises(DegenerateSeriesError):
        standardize_returns(ReturnPanel.complete(vals))


def test_stack_factors_reproduces_two_day_returns():
    from staggered_dfm.model import stack_factors

    p = random_params(np.random.default_rng(3), 4)
    td = build_two_day(p)
    n = 4
    zero = ModelParams(p.phi, p.loadings, np.full((3, n), 1e-30))
    panel, fg, fc = simulate(zero, PanelLayout(n, 60), 5)
    f = stack_factors(fg, fc)
    assert np.isnan(f[0, 6:8]).all() and not np.isnan(f[1:]).any()
    assert np.allclose(stack_two_day(panel)[1:], f[1:] @ td.Lambda.T, atol=1e-10)
