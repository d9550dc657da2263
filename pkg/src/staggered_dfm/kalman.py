"""Kalman filter and fixed-interval smoother for the one-day system.

The observation noise is diagonal, so every update is carried out in the
4-dimensional state space: with ``S = Z' Sigma^{-1} Z`` and
``b = Z' Sigma^{-1} v`` the innovation covariance ``F = Z P Z' + Sigma`` is
never formed. Missing returns are handled by dropping their rows, which is
the same as leaving them out of ``S`` and ``b``.

The smoother is the backward ``(r_t, N_t)`` recursion, which avoids
inverting predicted covariances and stays stable in the noiseless limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .model import ReturnPanel, StateSpaceSystem, stationary_state_cov

_LOG_2PI = float(np.log(2.0 * np.pi))


class NonFiniteLikelihoodError(FloatingPointError):
    """Raised when the innovation covariance is numerically singular."""


@dataclass(frozen=True)
class FilterOutput:
    """Forward-pass output; index ``s`` is period ``t = s + 1``."""

    pred_mean: np.ndarray  # (T, 4)
    pred_cov: np.ndarray  # (T, 4, 4)
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    loglik_t: np.ndarray  # (T,)

    @property
    def loglik(self) -> float:
        return float(self.loglik_t.sum())


@dataclass(frozen=True)
class SmoothedMoments:
    """Conditional moments given all data.

    ``lag_cross[s] = E[alpha_{s+1} alpha_s' | Y]`` for ``s = 0..T-2``.
    """

    mean: np.ndarray  # (T, 4)
    cov: np.ndarray  # (T, 4, 4)
    lag_cross: np.ndarray  # (T - 1, 4, 4)
    loglik: float

    @property
    def second(self) -> np.ndarray:
        """``E[alpha_t alpha_t' | Y]``."""
        return self.cov + self.mean[:, :, None] * self.mean[:, None, :]


@numba.njit(cache=True)
def _run(y, mask, zs, s2, phi, v0, smooth):
    n_t, n = y.shape
    eye = np.eye(4)
    tm = np.zeros((4, 4))
    tm[0, 0] = phi
    tm[1, 0] = 1.0
    tm[2, 1] = 1.0
    rr = np.zeros((4, 4))
    rr[0, 0] = 1.0
    rr[3, 3] = 1.0

    a_pred = np.zeros((n_t, 4))
    p_pred = np.zeros((n_t, 4, 4))
    a_filt = np.zeros((n_t, 4))
    p_filt = np.zeros((n_t, 4, 4))
    ll = np.zeros(n_t)
    us = np.zeros((n_t, 4))
    sts = np.zeros((n_t, 4, 4))

    a = np.zeros(4)
    p = v0.copy()
    for s in range(n_t):
        c = s % 3
        a_pred[s] = a
        p_pred[s] = p
        smat = np.zeros((4, 4))
        b = np.zeros(4)
        quad = 0.0
        logdet = 0.0
        n_obs = 0
        for i in range(n):
            if mask[s, i]:
                w = 1.0 / s2[c, i]
                v = y[s, i]
                for k in range(4):
                    v -= zs[c, i, k] * a[k]
                for k in range(4):
                    zk = zs[c, i, k] * w
                    b[k] += zk * v
                    for m in range(4):
                        smat[k, m] += zk * zs[c, i, m]
                quad += w * v * v
                logdet += np.log(s2[c, i])
                n_obs += 1
        if n_obs > 0:
            amat = eye + smat @ p
            h = np.linalg.inv(amat)
            u = h @ b
            st = h @ smat
            sign, ld = np.linalg.slogdet(amat)
            vfv = quad - b @ (p @ u)
            ll[s] = -0.5 * (n_obs * _LOG_2PI + logdet + ld + vfv)
            if sign <= 0 or not np.isfinite(ll[s]):
                ll[s] = np.nan
            a_f = a + p @ u
            ikz = eye - p @ st
            p_f = ikz @ p @ ikz.T + p @ h @ smat @ h.T @ p
            p_f = 0.5 * (p_f + p_f.T)
        else:
            u = np.zeros(4)
            st = np.zeros((4, 4))
            a_f = a.copy()
            p_f = p.copy()
        us[s] = u
        sts[s] = st
        a_filt[s] = a_f
        p_filt[s] = p_f
        a = tm @ a_f
        p = tm @ p_f @ tm.T + rr
        p = 0.5 * (p + p.T)

    a_sm = np.zeros((n_t, 4))
    p_sm = np.zeros((n_t, 4, 4))
    cross = np.zeros((max(n_t - 1, 0), 4, 4))
    if smooth:
        r = np.zeros(4)
        nm = np.zeros((4, 4))
        for s in range(n_t - 1, -1, -1):
            ps = p_pred[s]
            lmat = tm @ (eye - ps @ sts[s])
            if s < n_t - 1:
                # Cov(alpha_s, alpha_{s+1} | Y)
                cross[s] = ps @ lmat.T @ (eye - nm @ p_pred[s + 1])
            r = us[s] + lmat.T @ r
            nm = sts[s] + lmat.T @ nm @ lmat
            nm = 0.5 * (nm + nm.T)
            a_sm[s] = a_pred[s] + ps @ r
            pv = ps - ps @ nm @ ps
            p_sm[s] = 0.5 * (pv + pv.T)
    return a_pred, p_pred, a_filt, p_filt, ll, a_sm, p_sm, cross


def _arrays(system: StateSpaceSystem, panel: ReturnPanel):
    zs = np.ascontiguousarray(system.obs_matrices, dtype=np.float64)
    s2 = np.ascontiguousarray(system.obs_noise, dtype=np.float64)
    if panel.n_assets != zs.shape[1]:
        raise ValueError("panel and system disagree on the number of assets")
    y = np.ascontiguousarray(panel.values, dtype=np.float64)
    m = np.ascontiguousarray(panel.mask)
    v0 = np.ascontiguousarray(stationary_state_cov(system.phi))
    return y, m, zs, s2, system.phi, v0


def _check(ll: np.ndarray) -> None:
    if not np.all(np.isfinite(ll)):
        raise NonFiniteLikelihoodError("innovation covariance is numerically singular")


def kalman_filter(system: StateSpaceSystem, panel: ReturnPanel) -> FilterOutput:
    """Forward pass with the stationary prior; returns exact log-likelihood terms."""
    out = _run(*_arrays(system, panel), False)
    _check(out[4])
    return FilterOutput(*out[:5])


def kalman_smoother(system: StateSpaceSystem, panel: ReturnPanel) -> SmoothedMoments:
    """Smoothed first and second moments, including the lag-one cross moment."""
    out = _run(*_arrays(system, panel), True)
    _check(out[4])
    a_sm, p_sm, cov_next = out[5], out[6], out[7]
    # E[alpha_{s+1} alpha_s'] = Cov(alpha_s, alpha_{s+1})' + mean_{s+1} mean_s'
    lag = np.transpose(cov_next, (0, 2, 1)) + a_sm[1:, :, None] * a_sm[:-1, None, :]
    return SmoothedMoments(a_sm, p_sm, lag, float(out[4].sum()))


def loglik(system: StateSpaceSystem, panel: ReturnPanel) -> float:
    """Exact Gaussian log-likelihood of the observed returns."""
    return kalman_filter(system, panel).loglik
