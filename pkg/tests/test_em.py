from __future__ import annotations

import numpy as np
import pytest

from conftest import reference_dgp
from oracles import random_params
from staggered_dfm.em import (
    EmOptions,
    IncompleteDataError,
    MomentMatrices,
    expected_complete_loglik,
    extract_factors_gls,
    fit_mle_one_day,
    fit_qmle,
    fit_qmle_res,
    foc_residual,
    mstep_one_day,
    mstep_qmle_res,
    one_day_stats,
    starting_values,
    two_day_estep,
    update_phi,
)
from staggered_dfm.model import (
    DegenerateSeriesError,
    ModelParams,
    PanelLayout,
    ReturnPanel,
    TwoDayParams,
    build_two_day,
    implied_covariance,
    simulate,
    stack_two_day,
)
from staggered_dfm.restrictions import violations


def _panel(p, t, seed):
    return simulate(p, PanelLayout(p.n_assets, t), seed)[0]


def test_options_validation():
    with pytest.raises(ValueError):
        EmOptions(max_iter=0)
    with pytest.raises(ValueError):
        EmOptions(rel_tol=0.0)


def test_mle_trace_is_nondecreasing():
    rng = np.random.default_rng(5)
    for rep in range(4):
        p = reference_dgp(5, rep)
        panel = _panel(p, 300, rng)
        fit = fit_mle_one_day(panel, opts=EmOptions(max_iter=150))
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)


def test_mstep_is_coordinatewise_optimal():
    p = reference_dgp(5, 1)
    panel = _panel(p, 300, 2)
    st = one_day_stats(p, panel)
    new = mstep_one_day(st)
    base = expected_complete_loglik(new, st)
    vec = new.to_vector()
    for i in np.random.default_rng(0).choice(len(vec), 25, replace=False).tolist() + [len(vec) - 1]:
        for h in (1e-5, -1e-5):
            v = vec.copy()
            v[i] += h
            assert expected_complete_loglik(ModelParams.from_vector(v, 5), st) <= base + 1e-9


def test_phi_update_maximizes_its_criterion():
    p = reference_dgp(5, 3)
    st = one_day_stats(p, _panel(p, 300, 4))
    phi = update_phi(st)
    grid = np.linspace(-0.98, 0.98, 393)
    from staggered_dfm.em import _phi_objective

    assert _phi_objective(phi, st) >= _phi_objective(grid, st).max() - 1e-9


def test_starting_values_recover_restricted_structure():
    # continental loadings are estimated from T / 3 draws only, so a
    # longer sample than the loadings alone would need keeps 10% reliable
    n = 10
    z = np.empty((3, n, 4))
    s2 = np.empty((3, n))
    truth = [(0.5, 0.8, 0.7), (0.3, 0.6, 1.2), (0.4, 1.0, 0.5)]
    for c, (zg, zc, s) in enumerate(truth):
        z[c, :, :3] = zg
        z[c, :, 3] = zc
        s2[c] = s
    p = ModelParams(0.4, z, s2)
    start = starting_values(_panel(p, 6000, 9))
    for c, (zg, zc, s) in enumerate(truth):
        assert np.allclose(start.loadings[c, :, 0], zg, rtol=0.1)
        assert np.allclose(start.loadings[c, :, 3], zc, rtol=0.1)
        assert np.allclose(start.idio_var[c], s, rtol=0.1)
    assert abs(start.phi) < 1


def test_degenerate_column_rejected():
    p = reference_dgp(5, 0)
    panel = _panel(p, 300, 1)
    vals = np.array(panel.values)
    vals[1::3, 2] = 0.25
    with pytest.raises(DegenerateSeriesError):
        starting_values(ReturnPanel.complete(vals))


def test_refit_from_truth_barely_moves():
    p = reference_dgp(5, 2)
    panel = _panel(p, 1500, 3)
    fit = fit_mle_one_day(panel, start=p, opts=EmOptions(max_iter=300))
    refit = fit_mle_one_day(panel, start=fit.params, opts=EmOptions(max_iter=50))
    assert (refit.loglik - fit.loglik) / (panel.n_periods * 5) < 1e-4


def test_two_day_estep_matches_direct_formulas():
    p = reference_dgp(5, 4)
    td = build_two_day(p)
    panel = _panel(p, 120, 5)
    mom = MomentMatrices.from_panel(panel)
    st = two_day_estep(td.Lambda, td.M, td.Sigma_ee, mom)
    sig = implied_covariance(td)
    k = td.M @ td.Lambda.T @ np.linalg.inv(sig)
    assert np.allclose(st.Eyf, mom.S_yy @ k.T)
    assert np.allclose(st.Eff, td.M - k @ td.Lambda @ td.M + k @ mom.S_yy @ k.T)
    y = stack_two_day(panel)
    _, logdet = np.linalg.slogdet(sig)
    ll = -0.5 * (y.shape[0] * (y.shape[1] * np.log(2 * np.pi) + logdet)
                 + np.sum(y @ np.linalg.inv(sig) * y))
    assert np.isclose(st.loglik, ll)


def test_qmle_res_one_step_from_truth_is_small():
    p = reference_dgp(5, 6)
    td = build_two_day(p)
    panel = _panel(p, 6000, 7)
    st = two_day_estep(td.Lambda, td.M, td.Sigma_ee, MomentMatrices.from_panel(panel))
    new = mstep_qmle_res(st, 5)
    step = np.abs(new.to_vector() - p.to_vector()).max()
    assert step < 5 / np.sqrt(1000)


def test_qmle_res_and_mle_agree_without_persistence():
    # the two estimators use different likelihoods, so they agree only up
    # to sampling noise, which is roughly 0.1 per loading here
    p = reference_dgp(5, 8, phi=0.0)
    panel = _panel(p, 2250, 9)
    a = fit_mle_one_day(panel, opts=EmOptions(max_iter=300)).params
    b = fit_qmle_res(panel, opts=EmOptions(max_iter=300)).params
    err_a = np.mean(np.abs(a.loadings - p.loadings))
    err_b = np.mean(np.abs(b.loadings - p.loadings))
    assert max(err_a, err_b) < 0.12
    assert np.mean(np.abs(a.loadings - b.loadings)) < 0.12


def test_qmle_keeps_restrictions_and_sign_invariance():
    p = reference_dgp(6, 10)
    panel = _panel(p, 600, 11)
    opts = EmOptions(max_iter=40)
    fit = fit_qmle(panel, opts=opts, start=p)
    assert np.abs(violations(fit.params)).max() < 1e-6
    assert fit.foc_residual is not None
    td = build_two_day(p)
    s = np.ones(14)
    s[[8]] = -1  # a continental factor on its own
    flipped = TwoDayParams(td.Lambda * s, td.M * np.outer(s, s), td.Sigma_ee)
    fit2 = fit_qmle(panel, opts=opts, start=flipped)
    assert np.allclose(fit2.params.Lambda, fit.params.Lambda, atol=1e-8)


def test_qmle_refuses_masked_data():
    p = reference_dgp(5, 0)
    panel = _panel(p, 120, 1)
    mask = np.array(panel.mask)
    mask[3, 0] = False
    with pytest.raises(IncompleteDataError):
        fit_qmle(ReturnPanel(panel.values, mask), opts=EmOptions(max_iter=2))


def test_gls_factors():
    p = reference_dgp(5, 12)
    td = build_two_day(p)
    f = np.random.default_rng(0).normal(size=(4, 14))
    y = f @ td.Lambda.T
    panel = ReturnPanel.complete(y.reshape(-1, 5))
    assert np.allclose(extract_factors_gls(td, panel), f)
    scaled = TwoDayParams(td.Lambda * 2.0, td.M, td.Sigma_ee)
    assert np.allclose(extract_factors_gls(scaled, panel), f / 2.0)


def test_foc_residual_zero_at_population_moments():
    p = reference_dgp(5, 13)
    td = build_two_day(p)
    assert foc_residual(td, implied_covariance(td)) < 1e-10


def test_qmle_reaches_stationary_point_at_population_moments():
    # stacks whose sample second moments equal the model covariance exactly
    p = reference_dgp(5, 14)
    td = build_two_day(p)
    q, _ = np.linalg.qr(np.random.default_rng(15).normal(size=(200, 30)))
    y = np.sqrt(200) * q @ np.linalg.cholesky(implied_covariance(td)).T
    panel = ReturnPanel.complete(y.reshape(-1, 5))
    start = ModelParams(p.phi, p.loadings + 0.01, p.idio_var)
    off = np.sqrt(np.mean((build_two_day(start).Lambda - td.Lambda) ** 2))
    for accelerate in (False, True):
        fit = fit_qmle(panel, opts=EmOptions(max_iter=3000, accelerate=accelerate), start=start)
        assert fit.converged
        assert fit.foc_residual < 1e-4
        # weakly identified directions move slowly, so only require progress
        assert np.sqrt(np.mean((fit.params.Lambda - td.Lambda) ** 2)) < off
