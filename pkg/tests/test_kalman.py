from __future__ import annotations

import numpy as np
import pytest

from oracles import dense_gaussian, random_params
from staggered_dfm import kalman
from staggered_dfm.model import PanelLayout, ReturnPanel, build_state_space, simulate


def _random_panel(rng, p, t, missing=0.0):
    panel, _, _ = simulate(p, PanelLayout(p.n_assets, t), rng)
    mask = rng.uniform(size=panel.values.shape) >= missing
    return ReturnPanel(panel.values, mask)


@pytest.mark.parametrize("missing", [0.0, 0.3])
def test_smoother_matches_dense_oracle(missing):
    rng = np.random.default_rng(11)
    for _ in range(5):
        p = random_params(rng, 3)
        panel = _random_panel(rng, p, 18, missing)
        sm = kalman.kalman_smoother(build_state_space(p), panel)
        ll, mean, cov, lag = dense_gaussian(p, panel.values, panel.mask)
        assert abs(sm.loglik - ll) < 1e-8
        assert np.abs(sm.mean - mean).max() < 1e-8
        assert np.abs(sm.cov - cov).max() < 1e-8
        assert np.abs(sm.lag_cross - lag).max() < 1e-8


def test_fully_masked_period_equals_deleted_rows():
    rng = np.random.default_rng(2)
    p = random_params(rng, 2)
    panel = _random_panel(rng, p, 12)
    mask = panel.mask.copy()
    mask[4] = False  # a holiday for Europe on the second day
    masked = ReturnPanel(panel.values, mask)
    ll = kalman.loglik(build_state_space(p), masked)
    ll_dense, *_ = dense_gaussian(p, panel.values, mask)
    assert np.isclose(ll, ll_dense, atol=1e-10)


def test_filter_prediction_is_stationary_at_start():
    rng = np.random.default_rng(3)
    p = random_params(rng, 2)
    panel = _random_panel(rng, p, 6)
    out = kalman.kalman_filter(build_state_space(p), panel)
    from staggered_dfm.model import stationary_state_cov

    assert np.allclose(out.pred_cov[0], stationary_state_cov(p.phi))
    assert np.allclose(out.pred_mean[0], 0.0)
    assert np.isclose(out.loglik, kalman.loglik(build_state_space(p), panel))


def test_all_missing_gives_zero_loglik():
    rng = np.random.default_rng(4)
    p = random_params(rng, 2)
    panel = ReturnPanel(np.zeros((6, 2)), np.zeros((6, 2), dtype=bool))
    sm = kalman.kalman_smoother(build_state_space(p), panel)
    assert sm.loglik == 0.0
    assert np.allclose(sm.mean, 0.0)
