"""EM estimators: exact one-day MLE, restricted two-day QMLE and the QMLE.

* :func:`fit_mle_one_day` runs EM on the one-day state-space model with the
  Kalman smoother as E-step.
* :func:`fit_qmle_res` maximizes the two-day pseudo-likelihood that treats
  the two-day stacks as i.i.d., imposing the full structure of the stacked
  loading matrix and factor covariance.
* :func:`fit_qmle` maximizes the same pseudo-likelihood with the loadings
  and ``M`` left free apart from the 196 identification restrictions.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize_scalar

from . import kalman
from .model import (
    N_FACTORS,
    DegenerateSeriesError,
    ModelParams,
    PanelLayout,
    ReturnPanel,
    TwoDayParams,
    build_state_space,
    build_two_day,
    continent_of_block,
    loading_columns,
    phi_matrix,
    stack_two_day,
)
from .restrictions import RestrictionOperator, anchor_row_bases, restriction_set

log = logging.getLogger(__name__)

PHI_BOUND = 0.99
_PSI_FLOOR = 1e-6


class NonMonotoneLikelihoodError(RuntimeError):
    """The EM log-likelihood decreased, which signals a bug."""


class NonConvergenceError(RuntimeError):
    pass


class RotationFailureError(RuntimeError):
    pass


class SingularMomentError(np.linalg.LinAlgError):
    pass


class IncompleteDataError(ValueError):
    """The two-day pseudo-likelihood needs complete stacks."""


@dataclass(frozen=True)
class EmOptions:
    max_iter: int = 1000
    rel_tol: float = 1e-8
    param_tol: float = 1e-7
    trace: bool = True
    accelerate: bool = False

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.rel_tol <= 0 or self.param_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    """Outcome of an EM fit.

    ``params`` is a :class:`ModelParams` for the structural estimators and a
    :class:`TwoDayParams` for the QMLE.
    """

    estimator: str
    params: ModelParams | TwoDayParams
    loglik_trace: np.ndarray
    converged: bool
    n_iter: int
    foc_residual: float | None = None
    factors: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


@dataclass(frozen=True)
class MomentMatrices:
    """Sample second moments of the two-day stacks."""

    S_yy: np.ndarray
    T_f: int

    @classmethod
    def from_panel(cls, panel: ReturnPanel) -> "MomentMatrices":
        y = _complete_stacks(panel)
        return cls(y.T @ y / y.shape[0], y.shape[0])


def _complete_stacks(panel: ReturnPanel) -> np.ndarray:
    if not panel.is_complete:
        raise IncompleteDataError(
            "two-day estimators need complete stacks; use the drop-day missing policy"
        )
    return stack_two_day(panel)


# --------------------------------------------------------------------------
# sign convention


def normalize_signs(params: ModelParams) -> ModelParams:
    """Fix the sign of the global factor and of each continental factor.

    For ``phi != 0`` the only sign symmetries are a joint flip of all global
    loadings and a flip of each continent's continental loadings. The global
    sign is taken from the sum of Asia's ``z0`` column and each continental
    sign from the sum of that continent's ``z3`` column.
    """
    z = np.array(params.loadings)
    if z[0, :, 0].sum() < 0:
        z[..., :3] *= -1.0
    for c in range(3):
        if z[c, :, 3].sum() < 0:
            z[c, :, 3] *= -1.0
    return params.replace(loadings=z)


# --------------------------------------------------------------------------
# one-day sufficient statistics


@dataclass
class OneDayStats:
    """Smoothed sufficient statistics of the complete-data log-likelihood."""

    syy: np.ndarray  # (3, N) sum of y^2 over observed periods
    sya: np.ndarray  # (3, N, 4) sum of y E[alpha]
    saa: np.ndarray  # (3, N, 4, 4) sum of E[alpha alpha'] over observed periods
    count: np.ndarray  # (3, N)
    phi_a: float  # E[fg_{-1}^2]
    phi_b: float  # sum of E[fg_s^2] over transitions
    phi_c: float  # sum of E[fg_s fg_{s-1}]
    phi_d: float  # sum of E[fg_{s-1}^2]
    loglik: float


def one_day_stats(params: ModelParams, panel: ReturnPanel) -> OneDayStats:
    """E-step: smooth and collect the statistics the M-step needs."""
    sm = kalman.kalman_smoother(build_state_space(params), panel)
    e2 = sm.second
    n = panel.n_assets
    syy = np.empty((3, n))
    sya = np.empty((3, n, 4))
    saa = np.empty((3, n, 4, 4))
    cnt = np.empty((3, n))
    for c in range(3):
        rows = np.arange(c, panel.n_periods, 3)
        w = panel.mask[rows].astype(float)
        y = panel.values[rows]
        syy[c] = (y * y).sum(axis=0)
        sya[c] = y.T @ sm.mean[rows]
        cnt[c] = w.sum(axis=0)
        if panel.is_complete:
            saa[c] = e2[rows].sum(axis=0)
        else:
            saa[c] = np.einsum("ti,tkl->ikl", w, e2[rows])
    # transitions fg_{s-1} -> fg_s for s = 0..T, read off the state vectors
    return OneDayStats(
        syy, sya, saa, cnt,
        phi_a=float(e2[0, 2, 2]),
        phi_b=float(e2[:, 0, 0].sum() + e2[0, 1, 1]),
        phi_c=float(e2[:, 0, 1].sum() + e2[0, 1, 2]),
        phi_d=float(e2[:, 1, 1].sum() + e2[0, 2, 2]),
        loglik=sm.loglik,
    )


def _phi_objective(phi, st: OneDayStats):
    """Twice the phi-dependent part of the expected complete log-likelihood."""
    return (
        np.log1p(-phi * phi)
        - (1.0 - phi * phi) * st.phi_a
        - (st.phi_b - 2.0 * phi * st.phi_c + phi * phi * st.phi_d)
    )


def update_phi(st: OneDayStats) -> float:
    """Exact maximizer of the expected complete log-likelihood in ``phi``.

    The stationary prior on the first state adds ``log(1 - phi^2)`` and
    ``-(1 - phi^2) E[fg_{-1}^2]`` to the usual AR(1) regression criterion, so
    the first-order condition is the cubic
    ``-(a - d) phi^3 - c phi^2 + (a - d - 1) phi + c = 0``. Dropping those two
    terms gives the familiar ratio ``c / d``.
    """
    a, c, d = st.phi_a, st.phi_c, st.phi_d
    roots = np.roots([-(a - d), -c, a - d - 1.0, c])
    real = roots[np.abs(roots.imag) < 1e-9].real
    cand = real[np.abs(real) < 1.0]
    if cand.size == 0:
        raise SingularMomentError("no admissible root for phi")
    return float(cand[np.argmax(_phi_objective(cand, st))])


def expected_complete_loglik(params: ModelParams, st: OneDayStats) -> float:
    """Expected complete-data log-likelihood, up to parameter-free terms."""
    z, s2 = params.loadings, params.idio_var
    quad = st.syy - 2 * np.einsum("cik,cik->ci", z, st.sya) + np.einsum(
        "cik,cikl,cil->ci", z, st.saa, z
    )
    obs = -0.5 * (st.count * np.log(s2) + quad / s2).sum()
    return float(obs + 0.5 * _phi_objective(params.phi, st))


def mstep_one_day(st: OneDayStats) -> ModelParams:
    """Closed-form M-step for loadings, idiosyncratic variances and ``phi``."""
    if np.any(st.count < 1):
        raise SingularMomentError("an asset has no observed returns")
    try:
        z = np.linalg.solve(st.saa, st.sya[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMomentError("smoothed state moments are singular") from exc
    quad = st.syy - 2 * np.einsum("cik,cik->ci", z, st.sya) + np.einsum(
        "cik,cikl,cil->ci", z, st.saa, z
    )
    s2 = np.maximum(quad / st.count, _PSI_FLOOR)
    return ModelParams(update_phi(st), z, s2)


def _run_em(start, estep, mstep, opts: EmOptions, monotone: bool, name: str, accept=None):
    # ``accept(params)`` is an extra condition a tolerance stop must meet
    params = start
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        st = estep(params)
        ll = st.loglik
        if trace:
            drop = trace[-1] - ll
            if drop > 1e-6:
                msg = f"{name}: log-likelihood decreased by {drop:.3e} at iteration {it}"
                if monotone:
                    raise NonMonotoneLikelihoodError(msg)
                log.warning(msg)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= opts.rel_tol * abs(trace[-2]):
            if accept is None or accept(params):
                converged = True
                break
        new = mstep(st)
        step = np.max(np.abs(_as_vector(new) - _as_vector(params)))
        params = new
        if step < opts.param_tol and (accept is None or accept(params)):
            trace.append(estep(params).loglik)
            converged = True
            break
    return params, np.array(trace), converged, it


def _run_squarem(start, estep, mstep, to_vec, from_vec, opts: EmOptions, name: str, accept=None):
    """Squared-extrapolation acceleration of a monotone EM map.

    Each cycle takes two EM steps, extrapolates along the fitted
    geometric path and applies one more EM step to the extrapolated
    point. The extrapolation is kept only when it is feasible and does
    not lower the likelihood, so the trace stays nondecreasing.
    """
    params = start
    st = estep(params)
    trace = [st.loglik]
    converged = False
    it = 0
    while it < opts.max_iter:
        p1 = mstep(st)
        st1 = estep(p1)
        p2 = mstep(st1)
        st2 = estep(p2)
        it += 2
        x0, x1, x2 = to_vec(params), to_vec(p1), to_vec(p2)
        r = x1 - x0
        v = x2 - x1 - r
        best, best_st = p2, st2
        v_norm = np.linalg.norm(v)
        if v_norm > 0:
            alpha = min(-1.0, -np.linalg.norm(r) / v_norm)
            try:
                px = from_vec(x0 - 2 * alpha * r + alpha * alpha * v)
                stx = estep(px)
                p3 = mstep(stx)
                st3 = estep(p3)
                it += 1
                if np.isfinite(st3.loglik) and st3.loglik >= st2.loglik:
                    best, best_st = p3, st3
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                pass
        drop = trace[-1] - best_st.loglik
        if drop > 1e-6:
            raise NonMonotoneLikelihoodError(
                f"{name}: log-likelihood decreased by {drop:.3e} at iteration {it}"
            )
        step = np.max(np.abs(to_vec(best) - x0))
        params, st = best, best_st
        trace.append(st.loglik)
        small = abs(trace[-1] - trace[-2]) <= opts.rel_tol * abs(trace[-2]) or step < opts.param_tol
        if small and (accept is None or accept(params)):
            converged = True
            break
    return params, np.array(trace), converged, it


def _as_vector(p) -> np.ndarray:
    if isinstance(p, ModelParams):
        return p.to_vector()
    if isinstance(p, TwoDayParams):
        return np.concatenate([p.Lambda.ravel(), p.M.ravel(), p.Sigma_ee])
    return np.asarray(p)


# --------------------------------------------------------------------------
# starting values


def _restricted_mstep(st: OneDayStats) -> ModelParams:
    """M-step when each continent has one global, one continental and one noise scalar."""
    n = st.syy.shape[1]
    b = np.array([[1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    z = np.empty((3, n, 4))
    s2 = np.empty((3, n))
    for c in range(3):
        g = b @ st.saa[c].sum(axis=0) @ b.T
        h = b @ st.sya[c].sum(axis=0)
        theta = np.linalg.solve(g, h)
        row = theta @ b
        quad = st.syy[c].sum() - 2 * row @ st.sya[c].sum(axis=0) + row @ st.saa[c].sum(axis=0) @ row
        z[c] = row
        s2[c] = max(quad / st.count[c].sum(), _PSI_FLOOR)
    return ModelParams(update_phi(st), z, s2)


def _check_series(panel: ReturnPanel) -> None:
    for c in range(3):
        rows = np.arange(c, panel.n_periods, 3)
        v, m = panel.values[rows], panel.mask[rows]
        cnt = m.sum(axis=0)
        mu = np.where(m, v, 0).sum(axis=0) / np.maximum(cnt, 1)
        var = (np.where(m, v - mu, 0) ** 2).sum(axis=0) / np.maximum(cnt - 1, 1)
        bad = np.flatnonzero((cnt < 2) | (var <= 1e-14))
        if bad.size:
            raise DegenerateSeriesError(
                f"continent {'AEU'[c]}: degenerate series for assets {list(bad + 1)}"
            )


def starting_values(
    panel: ReturnPanel,
    layout: PanelLayout | None = None,
    opts: EmOptions | None = None,
) -> ModelParams:
    """Fit the scalar-restricted model by EM and expand it to full size.

    Within a continent all global loadings share one value, the continental
    loadings share another and the idiosyncratic variances a third.
    """
    layout = layout or panel.layout()
    if layout.n_blocks < 12:
        raise ValueError("starting values need at least 12 two-day blocks")
    _check_series(panel)
    opts = opts or EmOptions(max_iter=2000, rel_tol=1e-9, param_tol=1e-7)
    n = panel.n_assets
    z0 = np.empty((3, n, 4))
    s0 = np.empty((3, n))
    for c in range(3):
        rows = np.arange(c, panel.n_periods, 3)
        m = panel.mask[rows]
        v = np.where(m, panel.values[rows], 0.0)
        var = (v**2).sum() / m.sum()
        z0[c] = np.sqrt(var / 8.0)
        s0[c] = var / 2.0
    start = ModelParams(0.2, z0, s0)
    # plain EM on this small problem is sublinear at large N, so it is
    # accelerated; the safeguard keeps the trace nondecreasing
    params, _, conv, it = _run_squarem(
        start,
        lambda p: one_day_stats(p, panel),
        _restricted_mstep,
        lambda p: p.to_vector(),
        lambda x: ModelParams.from_vector(x, n),
        opts,
        name="starting values",
    )
    if not conv:
        raise NonConvergenceError(f"restricted model did not converge in {it} iterations")
    return normalize_signs(params)


# --------------------------------------------------------------------------
# MLE-one-day


def fit_mle_one_day(
    panel: ReturnPanel,
    layout: PanelLayout | None = None,
    opts: EmOptions | None = None,
    start: ModelParams | None = None,
) -> FitResult:
    """Exact maximum likelihood by EM with the Kalman smoother as E-step."""
    layout = layout or panel.layout()
    opts = opts or EmOptions()
    if start is None:
        start = starting_values(panel, layout)
    params, trace, conv, it = _run_em(
        start,
        lambda p: one_day_stats(p, panel),
        lambda st: normalize_signs(mstep_one_day(st)),
        opts,
        monotone=True,
        name="mle-one-day",
    )
    return FitResult("mle-one-day", params, trace, conv, it)


# --------------------------------------------------------------------------
# two-day pseudo-likelihood E-step


@dataclass
class TwoDayStats:
    """Working-independence E-step output, averaged over two-day blocks."""

    Eff: np.ndarray  # (14, 14) average E[f f']
    Eyf: np.ndarray  # (6N, 14) average E[y f']
    s_diag: np.ndarray  # (6N,) diagonal of S_yy
    loglik: float
    at: TwoDayParams | None = None  # parameters the moments were computed at


def two_day_estep(lam: np.ndarray, m: np.ndarray, psi: np.ndarray,
                  moments: MomentMatrices) -> TwoDayStats:
    """Conditional factor moments under the i.i.d. two-day Gaussian model.

    Works from the sample second moments only and uses ``Sigma_yy^{-1}``
    through the Woodbury identity, so the cost is independent of the
    sample length.
    """
    s_yy, t_f = moments.S_yy, moments.T_f
    p = s_yy.shape[0]
    pinv = 1.0 / psi
    ltp = lam.T * pinv  # Lambda' Psi^{-1}
    q = ltp @ lam
    try:
        m_chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise SingularMomentError("factor covariance is not positive definite") from exc
    cm = np.linalg.inv(m) + q
    cinv = np.linalg.inv(cm)
    cinv = 0.5 * (cinv + cinv.T)
    s_b = s_yy @ ltp.T  # average y z'
    zz = ltp @ s_b  # average z z'
    eyf = s_b @ cinv
    eff = cinv + cinv @ zz @ cinv
    s_diag = np.diag(s_yy).copy()
    _, ld_c = np.linalg.slogdet(cm)
    logdet = np.log(psi).sum() + 2 * np.log(np.diag(m_chol)).sum() + ld_c
    tr = (s_diag * pinv).sum() - np.sum(cinv * zz)
    ll = -0.5 * t_f * (p * np.log(2 * np.pi) + logdet + tr)
    return TwoDayStats(0.5 * (eff + eff.T), eyf, s_diag, float(ll))


def pseudo_loglik(two_day: TwoDayParams, panel: ReturnPanel) -> float:
    """Two-day i.i.d. Gaussian log-likelihood of the stacked panel."""
    mom = MomentMatrices.from_panel(panel)
    return two_day_estep(two_day.Lambda, two_day.M, two_day.Sigma_ee, mom).loglik


def _residual_var(lam, st: TwoDayStats) -> np.ndarray:
    return (
        st.s_diag
        - 2 * np.einsum("rk,rk->r", lam, st.Eyf)
        + np.einsum("rk,kl,rl->r", lam, st.Eff, lam)
    )


# --------------------------------------------------------------------------
# QMLE-res


def _phi_from_moments(eff8: np.ndarray) -> float:
    def crit(phi):
        phim = phi_matrix(phi)
        sign, ld = np.linalg.slogdet(phim)
        return ld + np.trace(np.linalg.solve(phim, eff8))

    res = minimize_scalar(crit, bounds=(-PHI_BOUND, PHI_BOUND), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x)


def mstep_qmle_res(st: TwoDayStats, n: int) -> ModelParams:
    """Restricted M-step: each asset's loading row appears in two day-blocks."""
    z = np.empty((3, n, 4))
    s2 = np.empty((3, n))
    lam = np.zeros((6 * n, N_FACTORS))
    for c in range(3):
        k1, k2 = c + 1, c + 4
        c1, c2 = list(loading_columns(k1)), list(loading_columns(k2))
        r1 = slice((k1 - 1) * n, k1 * n)
        r2 = slice((k2 - 1) * n, k2 * n)
        gram = st.Eff[np.ix_(c1, c1)] + st.Eff[np.ix_(c2, c2)]
        rhs = st.Eyf[r1][:, c1] + st.Eyf[r2][:, c2]
        z[c] = np.linalg.solve(gram, rhs.T).T
        lam[r1, c1] = z[c]
        lam[r2, c2] = z[c]
    psi = _residual_var(lam, st)
    for c in range(3):
        k1, k2 = c + 1, c + 4
        s2[c] = 0.5 * (psi[(k1 - 1) * n : k1 * n] + psi[(k2 - 1) * n : k2 * n])
    s2 = np.maximum(s2, _PSI_FLOOR)
    return ModelParams(_phi_from_moments(st.Eff[:8, :8]), z, s2)


def fit_qmle_res(
    panel: ReturnPanel,
    layout: PanelLayout | None = None,
    opts: EmOptions | None = None,
    start: ModelParams | None = None,
) -> FitResult:
    """EM for the fully restricted two-day pseudo-likelihood."""
    layout = layout or panel.layout()
    opts = opts or EmOptions()
    mom = MomentMatrices.from_panel(panel)
    n = panel.n_assets
    if start is None:
        start = starting_values(panel, layout)

    def estep(p: ModelParams) -> TwoDayStats:
        td = build_two_day(p)
        return two_day_estep(td.Lambda, td.M, td.Sigma_ee, mom)

    params, trace, conv, it = _run_em(
        start, estep, lambda st: normalize_signs(mstep_qmle_res(st, n)),
        opts, monotone=False, name="qmle-res",
    )
    return FitResult("qmle-res", params, trace, conv, it)


# --------------------------------------------------------------------------
# QMLE


def mstep_qmle(st: TwoDayStats, lam_prev: np.ndarray, psi_prev: np.ndarray, n: int):
    """M-step with the 177 loading restrictions; ``M`` is left free.

    Rows of assets 5..N are unrestricted regressions. The six rows of each
    anchor asset 1..4 are solved jointly on the null space of their zero
    and equality restrictions, weighting each row by its noise precision.
    """
    try:
        eff_inv = np.linalg.inv(st.Eff)
    except np.linalg.LinAlgError as exc:
        raise SingularMomentError("E[ff'] is singular") from exc
    lam = st.Eyf @ eff_inv
    for j, basis in enumerate(anchor_row_bases()):
        rows = [(k - 1) * n + j for k in range(1, 7)]
        w = 1.0 / psi_prev[rows]
        blocks = basis.reshape(6, N_FACTORS, -1)
        weighted = (w[:, None, None] * blocks).reshape(basis.shape)
        h = weighted.T @ (st.Eff @ blocks).reshape(basis.shape)
        g = weighted.T @ st.Eyf[rows].ravel()
        theta = np.linalg.solve(h, g)
        lam[rows] = (basis @ theta).reshape(6, N_FACTORS)
    psi = np.maximum(_residual_var(lam, st), _PSI_FLOOR * st.s_diag)
    return lam, 0.5 * (st.Eff + st.Eff.T), psi


class _CovarianceSubspace:
    """Affine set of symmetric ``M`` satisfying the factor-covariance restrictions.

    ``M(theta) = base + sum_i theta_i * dirs[i]``.
    """

    def __init__(self, op: RestrictionOperator):
        rows = op.m_coef[op.m_coef.any(axis=1)]
        vals = op.values[op.m_coef.any(axis=1)]
        iu = np.triu_indices(N_FACTORS)
        sym = np.zeros((len(iu[0]), N_FACTORS, N_FACTORS))
        sym[np.arange(len(iu[0])), iu[0], iu[1]] = 1.0
        sym[np.arange(len(iu[0])), iu[1], iu[0]] = 1.0
        g = rows @ sym.reshape(len(iu[0]), -1).T
        coef = np.linalg.lstsq(g, vals, rcond=None)[0]
        self.base = np.einsum("i,iab->ab", coef, sym)
        null = null_space(g)
        self.dirs = np.einsum("iq,iab->qab", null, sym)
        self._proj = np.linalg.pinv(self.dirs.reshape(len(self.dirs), -1).T)

    def coords(self, m: np.ndarray) -> np.ndarray:
        return self._proj @ (m - self.base).ravel()

    def matrix(self, theta: np.ndarray) -> np.ndarray:
        return self.base + np.einsum("q,qab->ab", theta, self.dirs)


def _gauss_cov_objective(m: np.ndarray, eff: np.ndarray) -> float:
    """``log|M| + tr(M^{-1} E)``; ``inf`` off the positive-definite cone."""
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return np.inf
    return float(2 * np.log(np.diag(chol)).sum() + np.trace(np.linalg.solve(m, eff)))


def restricted_factor_cov(eff: np.ndarray, m_prev: np.ndarray, space: _CovarianceSubspace,
                          max_iter: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Maximize the factor part of the complete-data likelihood over restricted ``M``.

    Newton iterations on the free coordinates with a backtracking line
    search, started from ``m_prev`` (which must satisfy the restrictions), so
    the objective never increases.
    """
    theta = space.coords(m_prev)
    m = space.matrix(theta)
    val = _gauss_cov_objective(m, eff)
    for _ in range(max_iter):
        mi = np.linalg.inv(m)
        x = mi @ space.dirs  # M^{-1} B_i
        w = mi - mi @ eff @ mi
        grad = space.dirs.reshape(len(space.dirs), -1) @ w.T.ravel()
        me = mi @ eff
        q = len(x)
        xt = np.swapaxes(x, 1, 2).reshape(q, -1)
        hess = -x.reshape(q, -1) @ xt.T + 2 * x.reshape(q, -1) @ np.swapaxes(me @ x, 1, 2).reshape(q, -1).T
        hess = 0.5 * (hess + hess.T)
        try:
            np.linalg.cholesky(hess)
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        while t > 1e-10:
            trial = theta - t * step
            new_val = _gauss_cov_objective(space.matrix(trial), eff)
            if new_val <= val:
                break
            t *= 0.5
        else:
            break
        theta, m = trial, space.matrix(trial)
        done = val - new_val < tol * max(1.0, abs(val))
        val = new_val
        if done:
            break
    return 0.5 * (m + m.T)


def rotate_to_restrictions(lam: np.ndarray, m: np.ndarray, tol: float = 1e-8,
                           max_iter: int = 100):
    """Find ``C`` with ``(Lambda C, C^{-1} M C^{-T})`` on the restriction set.

    The 196 restrictions in the 196 entries of ``C`` form a square nonlinear
    system, solved by damped Newton from ``C = I`` with the analytic
    Jacobian. Returns the rotated pair and the final squared violation;
    raises :class:`RotationFailureError` above ``tol``.
    """
    n = lam.shape[0] // 6
    op = _operator(n)
    lam_a = lam[op.anchor_rows]
    basis = np.eye(N_FACTORS * N_FACTORS).reshape(-1, N_FACTORS, N_FACTORS)

    def resid(cm):
        ci = np.linalg.inv(cm)
        return op.residual_anchor(lam_a @ cm, ci @ m @ ci.T)

    def jac(cm):
        ci = np.linalg.inv(cm)
        m_rot = ci @ m @ ci.T
        d_lam = lam_a @ basis  # direction E_ab for each column
        left = ci @ basis @ m_rot
        d_m = -(left + np.swapaxes(left, 1, 2))
        return op.linear_anchor(d_lam, d_m).T

    cm = np.eye(N_FACTORS)
    g = resid(cm)
    val = float(g @ g)
    for _ in range(max_iter):
        if val < 1e-28:
            break
        try:
            step = np.linalg.solve(jac(cm), g).reshape(N_FACTORS, N_FACTORS)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            trial = cm - t * step
            try:
                g_new = resid(trial)
            except np.linalg.LinAlgError:
                g_new = None
            if g_new is not None and np.all(np.isfinite(g_new)) and g_new @ g_new < val:
                break
            t *= 0.5
        else:
            break
        cm, g = trial, g_new
        val = float(g @ g)
    if val > tol:
        raise RotationFailureError(f"rotation stalled at squared violation {val:.3e}")
    ci = np.linalg.inv(cm)
    m_rot = ci @ m @ ci.T
    return lam @ cm, 0.5 * (m_rot + m_rot.T), val


@lru_cache(maxsize=8)
def _operator(n: int) -> RestrictionOperator:
    return RestrictionOperator(n)


@lru_cache(maxsize=8)
def _covariance_subspace(n: int) -> _CovarianceSubspace:
    return _CovarianceSubspace(_operator(n))


@lru_cache(maxsize=None)
def sign_groups() -> tuple[tuple[int, ...], ...]:
    """Factor columns whose signs must flip together to keep the restrictions.

    Equality restrictions between loadings and non-zero restrictions on
    off-diagonal ``M`` entries tie the signs of the columns involved.
    """
    parent = list(range(N_FACTORS))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for r in restriction_set(5):
        cols = {a - 1 for _, a, _, _ in r.lambda_terms} if r.kind == "equal" else set()
        if r.kind == "m" and r.value != 0:
            cols = {i - 1 for i, j, _ in r.m_terms if i != j} | {j - 1 for i, j, _ in r.m_terms if i != j}
        cols = sorted(cols)
        for c in cols[1:]:
            parent[find(c)] = find(cols[0])
    groups: dict[int, list[int]] = {}
    for a in range(N_FACTORS):
        groups.setdefault(find(a), []).append(a)
    return tuple(tuple(g) for g in groups.values())


def normalize_two_day_signs(lam: np.ndarray, m: np.ndarray):
    """Flip each sign group whose structurally nonzero loadings sum to a negative number."""
    n = lam.shape[0] // 6
    signs = np.ones(N_FACTORS)
    for group in sign_groups():
        total = 0.0
        for a in group:
            for k in range(1, 7):
                if a in loading_columns(k):
                    total += lam[(k - 1) * n : k * n, a].sum()
        if total < 0:
            signs[list(group)] = -1.0
    return lam * signs, m * np.outer(signs, signs)


def foc_residual(two_day: TwoDayParams, s_yy: np.ndarray) -> float:
    """Largest violation of the pseudo-likelihood first-order conditions.

    ``max(|Lambda' Sigma^{-1} (S - Sigma)|, |diag(Sigma^{-1} - Sigma^{-1} S Sigma^{-1})|)``
    with entrywise maxima.
    """
    lam = two_day.Lambda
    sig = lam @ two_day.M @ lam.T
    sig[np.diag_indices_from(sig)] += two_day.Sigma_ee
    sinv = np.linalg.inv(sig)
    g = sinv @ (s_yy - sig)
    first = np.max(np.abs(lam.T @ g))
    second = np.max(np.abs(np.diag(g @ sinv)))
    return float(max(first, second))


def fit_qmle(
    panel: ReturnPanel,
    layout: PanelLayout | None = None,
    opts: EmOptions | None = None,
    start: TwoDayParams | ModelParams | None = None,
    foc_tol: float = 1e-4,
) -> FitResult:
    """QMLE of ``(Lambda, M, Sigma_ee)`` under the 196 identification restrictions.

    Runs an ECM algorithm whose conditional M-steps keep every restriction
    satisfied: loadings on the null space of the 177 loading restrictions
    and ``M`` on the affine set of the 19 covariance restrictions. The
    rotation search onto the restriction set is still carried out at the
    end and its squared violation is reported in ``info``.

    The restrictions pin down the rotation only weakly, so at moderate
    sample sizes the pseudo-likelihood keeps creeping toward a singular
    ``M`` and the result depends on the stopping rule; ``foc_residual``
    tells how far from a stationary point the fit stopped. A fit counts as
    converged only when the usual tolerances are met and ``foc_residual``
    is below ``foc_tol``.
    """
    layout = layout or panel.layout()
    opts = opts or EmOptions()
    mom = MomentMatrices.from_panel(panel)
    n = panel.n_assets
    if n < 5:
        raise ValueError("the QMLE needs at least five assets per continent")
    if start is None:
        start = starting_values(panel, layout)
    if isinstance(start, ModelParams):
        start = build_two_day(start)

    def estep(td: TwoDayParams) -> TwoDayStats:
        st = two_day_estep(td.Lambda, td.M, td.Sigma_ee, mom)
        st.at = td
        return st

    space = _covariance_subspace(n)
    n_lam = 6 * n * N_FACTORS

    def mstep(st: TwoDayStats) -> TwoDayParams:
        lam, _, psi = mstep_qmle(st, st.at.Lambda, st.at.Sigma_ee, n)
        m = restricted_factor_cov(st.Eff, st.at.M, space)
        return TwoDayParams(lam, m, psi)

    def to_vec(td: TwoDayParams) -> np.ndarray:
        return np.concatenate([td.Lambda.ravel(), td.M.ravel(), td.Sigma_ee])

    def from_vec(x: np.ndarray) -> TwoDayParams:
        m = x[n_lam : n_lam + N_FACTORS**2].reshape(N_FACTORS, N_FACTORS)
        psi = x[n_lam + N_FACTORS**2 :]
        if np.any(psi < _PSI_FLOOR * mom.S_yy.diagonal()):
            raise ValueError("extrapolated noise variance below the floor")
        return TwoDayParams(x[:n_lam].reshape(6 * n, N_FACTORS), 0.5 * (m + m.T), psi)

    # a start off the restriction set is first rotated onto it
    lam0, m0, _ = rotate_to_restrictions(start.Lambda, start.M)
    start = TwoDayParams(lam0, m0, start.Sigma_ee)
    def stationary(td: TwoDayParams) -> bool:
        return foc_residual(td, mom.S_yy) < foc_tol

    if opts.accelerate:
        td, trace, conv, it = _run_squarem(start, estep, mstep, to_vec, from_vec, opts, "qmle", stationary)
    else:
        td, trace, conv, it = _run_em(start, estep, mstep, opts, monotone=True, name="qmle", accept=stationary)
    lam, m, viol = rotate_to_restrictions(td.Lambda, td.M)
    lam, m = normalize_two_day_signs(lam, m)
    td = TwoDayParams(lam, m, td.Sigma_ee)
    foc = foc_residual(td, mom.S_yy)
    return FitResult("qmle", td, trace, conv, it, foc_residual=foc,
                     info={"rotation_violation": viol})


# --------------------------------------------------------------------------
# factors


def extract_factors_gls(two_day: TwoDayParams, panel: ReturnPanel) -> np.ndarray:
    """GLS factor estimates ``(Lambda' Psi^{-1} Lambda)^{-1} Lambda' Psi^{-1} y`` per block."""
    y = _complete_stacks(panel)
    ltp = two_day.Lambda.T / two_day.Sigma_ee
    gram = ltp @ two_day.Lambda
    if np.linalg.cond(gram) > 1e12:
        raise SingularMomentError("Lambda' Psi^{-1} Lambda is singular")
    return np.linalg.solve(gram, ltp @ y.T).T
