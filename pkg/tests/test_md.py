from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staggered_dfm.inference import build_gamma
from staggered_dfm.md import (
    MinimumDistanceProblem,
    _objective,
    assemble_h,
    estimate_H,
    example_selector,
    fit_qmle_md,
    h_of_theta,
    h_representation,
    informative_entries,
    jacobian_h,
    loading_selector,
    md_problem,
    phi_selector,
    solve_md,
    structural_start,
)
from staggered_dfm.model import build_two_day

from conftest import reference_dgp

T_F = 125


@pytest.fixture(scope="module")
def truth():
    return reference_dgp(6, 31)


@pytest.fixture(scope="module")
def two_day(truth):
    return build_two_day(truth)


@pytest.fixture(scope="module")
def mach(two_day):
    return build_gamma(two_day, T_F)


def test_example_selector_sizes(two_day):
    sel, par = example_selector()
    h = assemble_h(two_day, sel)
    assert len(h) == 59
    assert len(structural_start(two_day, par)) == 10


def test_loading_selector_has_ten_row_blocks(two_day):
    sel, par = loading_selector(0, 3)
    assert len(sel) == 10
    assert len(assemble_h(two_day, sel)) == 140
    assert len(structural_start(two_day, par)) == 20


def test_empty_selector_and_bad_index(two_day):
    with pytest.raises(ValueError):
        assemble_h(two_day, ())
    with pytest.raises(IndexError):
        assemble_h(two_day, (("lambda", 1, 99),))
    with pytest.raises(IndexError):
        assemble_h(two_day, (("lambda", 7, 1),))


def test_unit_loading_lands_in_the_block_pattern():
    sel = (("lambda", 1, 2), ("lambda", 4, 2))
    par = (("z", 0, 2),)
    h = h_of_theta([1.0, 0.0, 0.0, 0.0], sel, par)
    first, second = h[:14], h[14:]
    assert np.flatnonzero(first).tolist() == [5]
    assert np.flatnonzero(second).tolist() == [2]
    assert first[5] == 1.0 and second[2] == 1.0


def test_zero_phi_gives_zero_off_diagonal_m():
    sel = (("M", 1, 2), ("M", 3, 1), ("M", 8, 2))
    assert np.all(h_of_theta([0.0], sel, (("phi",),)) == 0.0)


def test_invalid_phi_rejected():
    with pytest.raises(ValueError):
        h_of_theta([1.0], (("M", 1, 2),), (("phi",),))


@pytest.mark.parametrize("preset", [lambda: loading_selector(1, 5), phi_selector, example_selector])
def test_h_of_true_theta_matches_two_day(truth, two_day, preset):
    sel, par = preset()
    theta = structural_start(two_day, par)
    assert np.allclose(h_of_theta(theta, sel, par), assemble_h(two_day, sel), atol=1e-12)
    if par[-1] == ("phi",):
        assert np.isclose(theta[-1], truth.phi)


def test_jacobian_linear_entry():
    sel, par = (("lambda", 1, 1),), (("z", 0, 1),)
    jac = jacobian_h([0.3, 0.2, 0.1, 0.4], sel, par)
    assert np.isclose(jac[5, 0], 1.0, atol=1e-9)


def test_jacobian_of_m12_at_zero_phi_is_one():
    jac = jacobian_h([0.0], (("M", 1, 2),), (("phi",),))
    # d/dphi [phi / (1 - phi^2)] = (1 + phi^2) / (1 - phi^2)^2, equal to 1 at 0
    assert np.isclose(jac[0, 0], 1.0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.9, 0.9))
def test_jacobian_matches_closed_form_phi_derivative(phi):
    sel = tuple(("M", i, j) for i in range(1, 9) for j in range(1, i + 1))
    jac = jacobian_h([phi], sel, (("phi",),))[:, 0]
    oracle = []
    for i in range(1, 9):
        for j in range(1, i + 1):
            d = i - j
            # d/dphi of phi^d / (1 - phi^2)
            num = d * phi ** (d - 1) if d else 0.0
            oracle.append(num / (1 - phi**2) + 2 * phi ** (d + 1) / (1 - phi**2) ** 2)
    assert np.allclose(jac, oracle, atol=1e-6 * max(1.0, np.abs(oracle).max()))


def test_single_variance_selector_gives_two_sigma_fourth(two_day, mach):
    h_cov, flags = estimate_H(two_day, (("sigma2", 2, 5),), T_F, mach)
    s2 = two_day.Sigma_ee[1 * 6 + 4]
    assert np.isclose(h_cov[0, 0], 2 * s2**2)
    assert not flags["ridge"]


def test_variance_and_m_entries_uncorrelated(two_day, mach):
    sel = (("sigma2", 1, 6), ("vechM",))
    h_cov, _ = estimate_H(two_day, sel, T_F, mach, ridge=False)
    assert np.allclose(h_cov[0, 1:], 0.0, atol=1e-12 * h_cov[0, 0])


@pytest.mark.parametrize("preset", [lambda: loading_selector(2, 1), phi_selector, example_selector])
def test_h_cov_symmetric_psd(two_day, mach, preset):
    sel, _ = preset()
    h_cov, _ = estimate_H(two_day, sel, T_F, mach, ridge=False)
    assert np.allclose(h_cov, h_cov.T)
    assert np.linalg.eigvalsh(h_cov).min() > -1e-8 * np.abs(h_cov).max()


def test_pruned_entries_are_fixed_or_duplicated(two_day, mach):
    sel, _ = loading_selector(0, 2)
    rep = h_representation(mach, sel)
    keep = informative_entries(rep)
    h_cov = rep.covariance(mach)
    dropped = np.setdiff1d(np.arange(len(h_cov)), keep)
    assert len(dropped) > 0
    sub = h_cov[np.ix_(keep, keep)]
    np.linalg.cholesky(sub)
    # each dropped entry is either constant or a copy of a kept entry
    for i in dropped:
        if h_cov[i, i] <= 1e-14 * np.abs(h_cov).max():
            continue
        corr = h_cov[i, keep] / np.sqrt(h_cov[i, i] * np.diag(h_cov)[keep])
        assert np.isclose(corr.max(), 1.0)


def test_exact_h_recovers_theta(two_day, mach):
    sel, par = loading_selector(1, 4)
    theta = structural_start(two_day, par)
    for weight in ("efficient", "identity"):
        problem, _ = md_problem(two_day, sel, par, T_F, weight, mach)
        res = solve_md(problem, theta + 0.05)
        assert np.allclose(res.theta_check, theta, atol=1e-8)
        assert res.objective_at_optimum < 1e-14


def _noisy_problem(two_day, mach, seed, weight="efficient"):
    sel, par = phi_selector()
    problem, _ = md_problem(two_day, sel, par, T_F, weight, mach)
    rng = np.random.default_rng(seed)
    keep = problem.keep
    noise = np.zeros(len(problem.h_hat))
    cov = problem.H_cov[np.ix_(keep, keep)] / T_F
    noise[keep] = np.linalg.cholesky(cov) @ rng.standard_normal(len(keep))
    problem.h_hat = problem.h_hat + noise
    return problem, structural_start(two_day, par)


def test_weight_scaling_leaves_solution_unchanged(two_day, mach):
    problem, start = _noisy_problem(two_day, mach, 1)
    a = solve_md(problem, start)
    scaled = MinimumDistanceProblem(problem.h_hat, problem.selector, problem.params,
                                    7.5 * problem.weight, problem.H_cov, T_F, problem.keep)
    b = solve_md(scaled, start)
    assert np.allclose(a.theta_check, b.theta_check, atol=1e-8)
    assert np.allclose(a.O_cov, b.O_cov, rtol=1e-6)


def test_efficient_weight_covariance_formula(two_day, mach):
    problem, start = _noisy_problem(two_day, mach, 2)
    res = solve_md(problem, start)
    keep = problem.keep
    jac = jacobian_h(res.theta_check, problem.selector, problem.params)[keep]
    direct = np.linalg.inv(jac.T @ np.linalg.inv(problem.H_cov[np.ix_(keep, keep)]) @ jac) / T_F
    assert np.allclose(res.O_cov, direct, rtol=1e-6)
    assert np.allclose(res.O_cov, res.O_cov.T)
    assert np.linalg.eigvalsh(res.O_cov).min() >= 0


def test_efficient_weight_beats_identity():
    # 20 random problems from different structural draws
    worse = []
    for seed in range(20):
        p = reference_dgp(5, 100 + seed)
        td = build_two_day(p)
        m = build_gamma(td, T_F)
        sel, par = loading_selector(seed % 3, 1 + seed % 5)
        start = structural_start(td, par)
        eff = solve_md(md_problem(td, sel, par, T_F, "efficient", m)[0], start)
        ident = solve_md(md_problem(td, sel, par, T_F, "identity", m)[0], start)
        worse.append(np.diag(eff.O_cov) - np.diag(ident.O_cov))
    assert np.max(worse) <= 1e-10


def test_objective_nonincreasing(two_day, mach, monkeypatch):
    problem, start = _noisy_problem(two_day, mach, 3, weight="identity")
    seen = []
    import staggered_dfm.md as md

    original = md.jacobian_h

    def record(theta, selector, params):
        seen.append(_objective(problem, theta))
        return original(theta, selector, params)

    monkeypatch.setattr(md, "jacobian_h", record)
    solve_md(problem, start)
    assert len(seen) >= 2
    assert np.all(np.diff(seen) <= 1e-12 * max(seen))


def test_rank_deficient_start_rejected(two_day, mach):
    sel = (("lambda", 1, 1),)
    par = (("z", 0, 1), ("z", 1, 1))  # the second block never enters h
    h = assemble_h(two_day, sel)
    problem = MinimumDistanceProblem(h, sel, par, np.eye(14), np.eye(14), T_F)
    with pytest.raises(np.linalg.LinAlgError):
        solve_md(problem, np.zeros(8))


def test_fit_qmle_md_on_exact_two_day(truth, two_day):
    from staggered_dfm.em import FitResult

    fit = FitResult("qmle", two_day, np.zeros(1), True, 0)
    params, info = fit_qmle_md(fit, T_F)
    assert np.allclose(params.loadings, truth.loadings, atol=1e-8)
    assert np.isclose(params.phi, truth.phi, atol=1e-8)
    assert np.allclose(params.idio_var, truth.idio_var)
    assert info["weight"] == "efficient"
    assert np.all(info["se"]["loadings"] >= 0)
    assert info["se"]["phi"] > 0
