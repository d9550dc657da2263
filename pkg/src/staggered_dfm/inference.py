"""Standard errors for the QMLE, the GLS factors and the EM estimators.

The QMLE results rest on one linear object: the matrix ``Gamma`` that maps
the 336 cross moments ``(1/T_f) sum_t e_t^dagger kron f_t`` (noise of the
first four assets of each day-block times the factors) to ``vec(A)``,
where ``A`` is the rotation-like discrepancy between the QMLE and the
truth. Every loading, factor-covariance and factor estimate inherits its
first-order fluctuation through ``Gamma``.

``Gamma`` comes from linearizing the 196 identification restrictions
around the truth. A loading row moves by ``A lambda + M^{-1} u`` and ``M``
by ``-(A'M + MA)``; requiring the perturbed parameters to satisfy every
restriction gives a square linear system for ``vec(A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kalman
from .em import FitResult, MomentMatrices, one_day_stats
from .model import (
    N_FACTORS,
    ModelParams,
    ReturnPanel,
    TwoDayParams,
    build_state_space,
    build_two_day,
    loading_columns,
)
from .restrictions import ZERO_STEP_PIVOTS, ZERO_STEPS, RestrictionOperator, restriction_set

N_ANCHOR = 24  # four anchor assets in each of six day-blocks
N_CROSS = N_ANCHOR * N_FACTORS  # 336
_COND_LIMIT = 1e10


class SingularAnchorError(np.linalg.LinAlgError):
    """A block of anchor loadings needed to pin down the rotation is singular."""


class NonPositiveDefiniteHessianError(np.linalg.LinAlgError):
    """The observed information is not positive definite."""


# --------------------------------------------------------------------------
# matrix helpers


def duplication_matrix(n: int) -> np.ndarray:
    """``D_n`` with ``vec(S) = D_n vech(S)`` for symmetric ``S`` (column-major)."""
    d = np.zeros((n * n, n * (n + 1) // 2))
    col = 0
    for j in range(n):
        for i in range(j, n):
            d[i + n * j, col] = 1.0
            d[j + n * i, col] = 1.0
            col += 1
    return d


def duplication_pinv(n: int) -> np.ndarray:
    """Moore-Penrose inverse ``D_n^+ = (D_n' D_n)^{-1} D_n'``."""
    d = duplication_matrix(n)
    return np.linalg.solve(d.T @ d, d.T)


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """``K_{m,n}`` with ``K vec(A) = vec(A')`` for ``A`` of shape ``(m, n)``."""
    k = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            k[j + n * i, i + m * j] = 1.0
    return k


def vech(a: np.ndarray) -> np.ndarray:
    """Column-major stack of the lower triangle."""
    n = a.shape[0]
    return np.concatenate([a[j:, j] for j in range(n)])


def unvech(v: np.ndarray) -> np.ndarray:
    n = int((np.sqrt(8 * len(v) + 1) - 1) / 2)
    return (duplication_matrix(n) @ v).reshape(n, n, order="F")


def anchor_index(k: int, j: int) -> int:
    """0-based position of block ``k``'s asset ``j`` (both 1-based) in ``e^dagger``."""
    if not (1 <= k <= 6 and 1 <= j <= 4):
        raise IndexError("anchor assets are j = 1..4 in blocks k = 1..6")
    return 4 * (k - 1) + j - 1


def nearest_pd(a: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Symmetric matrix with eigenvalues clipped from below at ``floor * max|eig|``."""
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    w = np.maximum(w, floor * max(np.abs(w).max(), 1.0))
    return (v * w) @ v.T


# --------------------------------------------------------------------------
# Gamma


@dataclass(frozen=True)
class AsymptoticMachinery:
    """Plug-in ingredients of the QMLE asymptotic distributions."""

    Gamma: np.ndarray  # (196, 336)
    Sigma_ee_dagger: np.ndarray  # (24, 24) diagonal
    Q_hat: np.ndarray  # (14, 14) (1/N) Lambda' Sigma_ee^{-1} Lambda
    two_day: TwoDayParams
    T_f: int

    def __post_init__(self) -> None:
        assert self.Gamma.shape == (N_FACTORS * N_FACTORS, N_CROSS)
        assert self.Sigma_ee_dagger.shape == (N_ANCHOR, N_ANCHOR)

    @property
    def n_assets(self) -> int:
        return self.two_day.n_assets

    @property
    def M(self) -> np.ndarray:
        return self.two_day.M

    @property
    def Delta(self) -> float:
        return self.n_assets / self.T_f

    def iota(self, k: int, j: int) -> np.ndarray:
        out = np.zeros(N_ANCHOR)
        out[anchor_index(k, j)] = 1.0
        return out

    @property
    def cross_cov(self) -> np.ndarray:
        """Asymptotic covariance ``Sigma_ee^dagger kron M`` of the 336 cross moments."""
        return np.kron(self.Sigma_ee_dagger, self.M)

    @property
    def vec_a_cov(self) -> np.ndarray:
        """Asymptotic covariance of ``sqrt(T_f) vec(A)``."""
        g = self.Gamma
        return g @ self.cross_cov @ g.T


def _check_anchor_blocks(lam: np.ndarray, n: int) -> None:
    for label, k, assets, _ in ZERO_STEPS:
        rows = [(k - 1) * n + c - 1 for c in assets]
        cols = [b - 1 for b in ZERO_STEP_PIVOTS[label]]
        block = lam[np.ix_(rows, cols)]
        if np.linalg.cond(block) > _COND_LIMIT:
            raise SingularAnchorError(f"anchor block of step {label} is singular")


def restriction_jacobians(two_day: TwoDayParams) -> tuple[np.ndarray, np.ndarray]:
    """Linearized restrictions ``G vec(A) + B x = 0``.

    ``x`` stacks the cross moments of the anchor noises with the factors,
    with anchor ``(k, j)`` occupying entries ``14 * anchor_index(k, j)``
    onward. ``vec`` is column-major, so ``A[a, b]`` sits at ``a + 14 b``.
    """
    n = two_day.n_assets
    lam, m = two_day.Lambda, two_day.M
    minv = np.linalg.inv(m)
    nr = N_FACTORS * N_FACTORS
    g = np.zeros((nr, nr))
    b = np.zeros((nr, N_CROSS))
    cols = np.arange(N_FACTORS)
    for r, res in enumerate(restriction_set(n)):
        for k, a, c, w in res.lambda_terms:
            row = (k - 1) * n + c - 1
            # d Lambda[row, a] = sum_b A[a, b] Lambda[row, b] + (M^{-1} x_row)[a]
            g[r, (a - 1) + N_FACTORS * cols] += w * lam[row]
            start = N_FACTORS * anchor_index(k, c)
            b[r, start : start + N_FACTORS] += w * minv[a - 1]
        for i, j, w in res.m_terms:
            # d M[i, j] = -(A' M + M A)[i, j]
            g[r, cols + N_FACTORS * (i - 1)] -= w * m[:, j - 1]
            g[r, cols + N_FACTORS * (j - 1)] -= w * m[i - 1, :]
    return g, b


def build_gamma(two_day: TwoDayParams, T_f: int) -> AsymptoticMachinery:
    """Construct ``Gamma`` and the other plug-in quantities at ``two_day``."""
    n = two_day.n_assets
    if n < 5:
        raise ValueError("at least five assets per continent are required")
    _check_anchor_blocks(two_day.Lambda, n)
    g, b = restriction_jacobians(two_day)
    if np.linalg.cond(g) > _COND_LIMIT:
        raise SingularAnchorError("linearized restrictions do not determine A")
    gamma = -np.linalg.solve(g, b)
    dagger = np.array(
        [two_day.Sigma_ee[(p - 1) * n + q - 1] for p in range(1, 7) for q in range(1, 5)]
    )
    ltp = two_day.Lambda.T / two_day.Sigma_ee
    q_hat = ltp @ two_day.Lambda / n
    return AsymptoticMachinery(gamma, np.diag(dagger), 0.5 * (q_hat + q_hat.T), two_day, int(T_f))


# --------------------------------------------------------------------------
# QMLE covariances


def qmle_loading_cov(mach: AsymptoticMachinery, k: int, j: int) -> np.ndarray:
    """Asymptotic covariance of ``lambda_hat_{k,j}`` (already divided by ``T_f``)."""
    n = mach.n_assets
    row = (k - 1) * n + j - 1
    lam = mach.two_day.Lambda[row]
    s2 = mach.two_day.Sigma_ee[row]
    m = mach.M
    left = np.kron(lam[None, :], np.eye(N_FACTORS)) @ mach.Gamma  # (14, 336)
    cov = left @ mach.cross_cov @ left.T + np.linalg.inv(m) * s2
    if j <= 4:
        cross = left @ np.kron(mach.iota(k, j)[:, None], np.eye(N_FACTORS)) * s2
        cov = cov + cross + cross.T
    return 0.5 * (cov + cov.T) / mach.T_f


def se_qmle_loadings(mach: AsymptoticMachinery) -> np.ndarray:
    """Standard errors of every loading, shaped like ``Lambda``."""
    n = mach.n_assets
    out = np.empty((6 * n, N_FACTORS))
    for k in range(1, 7):
        for j in range(1, n + 1):
            out[(k - 1) * n + j - 1] = np.sqrt(np.maximum(np.diag(qmle_loading_cov(mach, k, j)), 0.0))
    return out


def se_qmle_sigma(sigma2, T_f: int):
    """``sqrt(2 sigma^4 / T_f)``."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be positive")
    return np.sqrt(2.0 * sigma2**2 / T_f)


def qmle_m_cov(mach: AsymptoticMachinery) -> np.ndarray:
    """Covariance of ``vech(M_hat)``, 105 x 105, already divided by ``T_f``."""
    dp = duplication_pinv(N_FACTORS)
    left = dp @ np.kron(np.eye(N_FACTORS), mach.M) @ mach.Gamma
    cov = 4.0 * left @ mach.cross_cov @ left.T
    return 0.5 * (cov + cov.T) / mach.T_f


def se_qmle_M(mach: AsymptoticMachinery) -> tuple[np.ndarray, np.ndarray]:
    """Covariance of ``vech(M_hat)`` and the standard errors as a 14 x 14 matrix."""
    cov = qmle_m_cov(mach)
    se = unvech(np.sqrt(np.maximum(np.diag(cov), 0.0)))
    return cov, se


def phi_from_m12(m12: float) -> float:
    """Invert ``M[0, 1] = phi / (1 - phi^2)`` on ``(-1, 1)``."""
    if m12 == 0:
        return 0.0
    return float((np.sqrt(1.0 + 4.0 * m12 * m12) - 1.0) / (2.0 * m12))


def se_phi_from_m12(phi: float, se_m12: float) -> float:
    """Delta-method standard error of ``phi`` recovered from ``M[0, 1]``."""
    dm_dphi = (1.0 + phi * phi) / (1.0 - phi * phi) ** 2
    return float(se_m12 / dm_dphi)


def gls_factor_cov(mach: AsymptoticMachinery, f_t: np.ndarray) -> np.ndarray:
    """Covariance of the GLS factor estimate conditional on ``f_t``, divided by ``N``."""
    f_t = np.asarray(f_t, dtype=float)
    kmat = commutation_matrix(N_FACTORS, N_FACTORS)
    left = np.kron(f_t[None, :], np.eye(N_FACTORS)) @ kmat @ mach.Gamma
    first = left @ mach.cross_cov @ left.T
    q_inv = np.linalg.inv(mach.Q_hat)
    cov = (mach.Delta * first + q_inv) / mach.n_assets
    return 0.5 * (cov + cov.T)


def se_gls_factors(mach: AsymptoticMachinery, factors: np.ndarray) -> np.ndarray:
    """Standard errors for each row of a factor path."""
    factors = np.atleast_2d(factors)
    return np.array([np.sqrt(np.maximum(np.diag(gls_factor_cov(mach, f)), 0.0)) for f in factors])


# --------------------------------------------------------------------------
# joint linear representations


@dataclass
class LinearRepresentation:
    """First-order expansion of estimates in independent noise sources.

    ``sqrt(T_f) (estimate - truth) = x_coef @ X + sum_r u_coef[:, r] @ U_r + s_coef @ S``
    where ``X`` are the 336 anchor cross moments, ``U_r`` the 14 cross
    moments of non-anchor row ``r`` and ``S_r`` the centred squared noise of
    row ``r``. Rows of ``u_coef`` for anchor rows stay zero.
    """

    x_coef: np.ndarray  # (n, 336)
    u_coef: np.ndarray  # (n, 6N, 14)
    s_coef: np.ndarray  # (n, 6N)

    def covariance(self, mach: AsymptoticMachinery) -> np.ndarray:
        """Covariance of the represented estimates, divided by ``T_f``."""
        psi = mach.two_day.Sigma_ee
        cov = self.x_coef @ mach.cross_cov @ self.x_coef.T
        n = len(self.u_coef)
        um = (self.u_coef @ mach.M) * psi[None, :, None]
        cov += um.reshape(n, -1) @ self.u_coef.reshape(n, -1).T
        cov += (self.s_coef * (2.0 * psi**2)) @ self.s_coef.T
        return 0.5 * (cov + cov.T) / mach.T_f

    @staticmethod
    def stack(parts: list["LinearRepresentation"]) -> "LinearRepresentation":
        return LinearRepresentation(
            np.concatenate([p.x_coef for p in parts]),
            np.concatenate([p.u_coef for p in parts]),
            np.concatenate([p.s_coef for p in parts]),
        )


def _empty_rep(mach: AsymptoticMachinery, rows: int) -> LinearRepresentation:
    p = 6 * mach.n_assets
    return LinearRepresentation(
        np.zeros((rows, N_CROSS)), np.zeros((rows, p, N_FACTORS)), np.zeros((rows, p))
    )


def loading_representation(mach: AsymptoticMachinery, k: int, j: int) -> LinearRepresentation:
    """Representation of the 14 entries of ``lambda_hat_{k,j}``."""
    n = mach.n_assets
    row = (k - 1) * n + j - 1
    lam = mach.two_day.Lambda[row]
    minv = np.linalg.inv(mach.M)
    rep = _empty_rep(mach, N_FACTORS)
    rep.x_coef[:] = np.kron(lam[None, :], np.eye(N_FACTORS)) @ mach.Gamma
    if j <= 4:
        start = N_FACTORS * anchor_index(k, j)
        rep.x_coef[:, start : start + N_FACTORS] += minv
    else:
        rep.u_coef[:, row, :] = minv
    return rep


def m_representation(mach: AsymptoticMachinery) -> LinearRepresentation:
    """Representation of ``vech(M_hat)``."""
    rep = _empty_rep(mach, N_FACTORS * (N_FACTORS + 1) // 2)
    dp = duplication_pinv(N_FACTORS)
    rep.x_coef[:] = -2.0 * dp @ np.kron(np.eye(N_FACTORS), mach.M) @ mach.Gamma
    return rep


def sigma_representation(mach: AsymptoticMachinery, rows: list[int]) -> LinearRepresentation:
    """Representation of ``Sigma_ee[rows]``."""
    rep = _empty_rep(mach, len(rows))
    rep.s_coef[np.arange(len(rows)), rows] = 1.0
    return rep


# --------------------------------------------------------------------------
# numerical Hessian standard errors


@dataclass
class StdErrorReport:
    """Standard errors laid out like the parameter object they belong to."""

    method: str  # "analytic-QMLE" | "analytic-MD" | "numerical-hessian"
    se: dict[str, np.ndarray]
    covariance: np.ndarray | None = None
    flags: dict = field(default_factory=dict)


def numerical_hessian(fun, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central second-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = fun(x)
    hess = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        hess[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            val = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej))
            hess[i, j] = hess[j, i] = val / (4 * h[i] * h[j])
    return hess


def jacobian_of_gradient(grad, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Symmetrized central-difference Jacobian of a gradient function."""
    x = np.asarray(x, dtype=float)
    h = rel_step * np.maximum(1.0, np.abs(x))
    cols = []
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h[i]
        cols.append((grad(x + e) - grad(x - e)) / (2 * h[i]))
    hess = np.array(cols).T
    return 0.5 * (hess + hess.T)


def one_day_score(params: ModelParams, panel: ReturnPanel) -> np.ndarray:
    """Gradient of the exact one-day log-likelihood, in ``ModelParams.to_vector`` order.

    By the Fisher identity it equals the gradient of the expected
    complete-data log-likelihood with the smoothed moments held at
    ``params``.
    """
    st = one_day_stats(params, panel)
    z, s2, phi = params.loadings, params.idio_var, params.phi
    g_z = (st.sya - np.einsum("cikl,cil->cik", st.saa, z)) / s2[..., None]
    quad = st.syy - 2 * np.einsum("cik,cik->ci", z, st.sya) + np.einsum(
        "cik,cikl,cil->ci", z, st.saa, z
    )
    g_s = 0.5 * (quad / s2**2 - st.count / s2)
    g_phi = -phi / (1 - phi * phi) + phi * st.phi_a + st.phi_c - phi * st.phi_d
    return np.concatenate([g_z.ravel(), g_s.ravel(), [g_phi]])


def _phi_matrix_derivative(phi: float, size: int = 8) -> np.ndarray:
    idx = np.arange(size)
    lag = np.abs(idx[:, None] - idx[None, :])
    den = 1.0 - phi * phi
    with np.errstate(divide="ignore", invalid="ignore"):
        first = np.where(lag > 0, lag * phi ** np.maximum(lag - 1, 0), 0.0) / den
    return first + 2.0 * phi ** (lag + 1) / den**2


def two_day_score(params: ModelParams, moments: MomentMatrices) -> np.ndarray:
    """Gradient of the two-day pseudo-log-likelihood in the structural parameters."""
    td = build_two_day(params)
    lam, m, psi = td.Lambda, td.M, td.Sigma_ee
    n = params.n_assets
    ltp = lam.T / psi
    core = np.linalg.inv(np.linalg.inv(m) + ltp @ lam)
    sinv = np.diag(1.0 / psi) - ltp.T @ core @ ltp  # Woodbury
    w = sinv @ moments.S_yy @ sinv - sinv
    t_f = moments.T_f
    g_lam = t_f * w @ lam @ m
    g_m = 0.5 * t_f * lam.T @ w @ lam
    g_psi = 0.5 * t_f * np.diag(w)
    g_z = np.zeros((3, n, 4))
    g_s = np.zeros((3, n))
    for k in range(1, 7):
        c = (k - 1) % 3
        rows = slice((k - 1) * n, k * n)
        g_z[c] += g_lam[rows][:, list(loading_columns(k))]
        g_s[c] += g_psi[rows]
    g_phi = float(np.sum(g_m[:8, :8] * _phi_matrix_derivative(params.phi)))
    return np.concatenate([g_z.ravel(), g_s.ravel(), [g_phi]])


def se_numerical_hessian(fit: FitResult, panel: ReturnPanel, which: str | None = None,
                         rel_step: float = 1e-4) -> StdErrorReport:
    """Observed-information standard errors for the MLE-one-day or the QMLE-res.

    The Hessian is the central-difference Jacobian of the analytic score,
    so it costs two score evaluations per parameter. If the observed
    information is not positive definite its nearest positive-definite
    projection is used and ``flags["projected"]`` is set.
    """
    which = which or fit.estimator
    params = fit.params
    if not isinstance(params, ModelParams):
        raise TypeError("numerical-Hessian standard errors need a structural fit")
    if which == "mle-one-day":
        def grad(v):
            return one_day_score(ModelParams.from_vector(v, params.n_assets), panel)
    elif which == "qmle-res":
        mom = MomentMatrices.from_panel(panel)

        def grad(v):
            return two_day_score(ModelParams.from_vector(v, params.n_assets), mom)
    else:
        raise ValueError(f"unknown estimator {which!r}")
    info = -jacobian_of_gradient(grad, params.to_vector(), rel_step)
    flags = {"heuristic": True, "projected": False}
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        info = nearest_pd(info)
        flags["projected"] = True
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    n = params.n_assets
    return StdErrorReport(
        "numerical-hessian",
        {
            "loadings": se[: 12 * n].reshape(3, n, 4),
            "idio_var": se[12 * n : -1].reshape(3, n),
            "phi": np.array(se[-1]),
        },
        cov,
        flags,
    )


def se_qmle(fit: FitResult, panel: ReturnPanel | None = None, T_f: int | None = None) -> StdErrorReport:
    """Analytic standard errors of a QMLE fit: loadings, ``M`` and ``Sigma_ee``."""
    td = fit.params
    if not isinstance(td, TwoDayParams):
        raise TypeError("analytic QMLE standard errors need a TwoDayParams fit")
    if T_f is None:
        if panel is None:
            raise ValueError("need either a panel or T_f")
        T_f = panel.n_periods // 6
    mach = build_gamma(td, T_f)
    m_cov, m_se = se_qmle_M(mach)
    return StdErrorReport(
        "analytic-QMLE",
        {"Lambda": se_qmle_loadings(mach), "M": m_se, "Sigma_ee": se_qmle_sigma(td.Sigma_ee, T_f)},
        m_cov,
        {},
    )
