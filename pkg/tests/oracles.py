"""Independent reference computations used by the tests.

Nothing here calls the Kalman recursions; the dense constructions build the
joint Gaussian law of all states and observations directly.
"""

from __future__ import annotations

import numpy as np

from staggered_dfm.model import ModelParams, transition_matrix


def stationary_cov_by_iteration(phi: float, n_iter: int = 4000) -> np.ndarray:
    """Var(alpha) by iterating V <- T V T' + R R' to convergence."""
    tm = transition_matrix(phi)
    rr = np.diag([1.0, 0.0, 0.0, 1.0])
    v = np.zeros((4, 4))
    for _ in range(n_iter):
        v = tm @ v @ tm.T + rr
    return v


def dense_state_cov(phi: float, n_periods: int) -> np.ndarray:
    """Joint covariance of (alpha_1, ..., alpha_T) under the stationary law."""
    tm = transition_matrix(phi)
    v = stationary_cov_by_iteration(phi)
    powers = [np.eye(4)]
    for _ in range(n_periods):
        powers.append(tm @ powers[-1])
    big = np.zeros((4 * n_periods, 4 * n_periods))
    for s in range(n_periods):
        for t in range(s, n_periods):
            block = powers[t - s] @ v  # Cov(alpha_t, alpha_s)
            big[4 * t : 4 * t + 4, 4 * s : 4 * s + 4] = block
            big[4 * s : 4 * s + 4, 4 * t : 4 * t + 4] = block.T
    return big


def dense_observation_operator(params: ModelParams, mask: np.ndarray):
    """Selection of observed returns as a linear map of the stacked states."""
    n_periods, n = mask.shape
    rows, noise = [], []
    for s in range(n_periods):
        c = s % 3
        for i in range(n):
            if mask[s, i]:
                r = np.zeros(4 * n_periods)
                r[4 * s : 4 * s + 4] = params.loadings[c, i]
                rows.append(r)
                noise.append(params.idio_var[c, i])
    return np.array(rows), np.array(noise)


def dense_gaussian(params: ModelParams, values: np.ndarray, mask: np.ndarray):
    """Log-likelihood and smoothed moments from the dense joint Gaussian.

    Returns (loglik, means (T,4), covs (T,4,4), lag (T-1,4,4)) where
    ``lag[s] = E[alpha_{s+1} alpha_s' | Y]``.
    """
    n_periods = values.shape[0]
    caa = dense_state_cov(params.phi, n_periods)
    zbig, noise = dense_observation_operator(params, mask)
    y = values[mask]
    cyy = zbig @ caa @ zbig.T + np.diag(noise)
    cay = caa @ zbig.T
    sign, logdet = np.linalg.slogdet(cyy)
    sol = np.linalg.solve(cyy, y)
    ll = -0.5 * (y.size * np.log(2 * np.pi) + logdet + y @ sol)
    mean = (cay @ sol).reshape(n_periods, 4)
    post = caa - cay @ np.linalg.solve(cyy, cay.T)
    covs = np.array([post[4 * s : 4 * s + 4, 4 * s : 4 * s + 4] for s in range(n_periods)])
    lag = np.array(
        [
            post[4 * s + 4 : 4 * s + 8, 4 * s : 4 * s + 4] + np.outer(mean[s + 1], mean[s])
            for s in range(n_periods - 1)
        ]
    )
    return ll, mean, covs, lag


def stacked_one_day_cov(params: ModelParams) -> np.ndarray:
    """Covariance of six consecutive periods (A, E, U, A, E, U) from the state recursion."""
    n = params.n_assets
    mask = np.ones((6, n), dtype=bool)
    caa = dense_state_cov(params.phi, 6)
    zbig, noise = dense_observation_operator(params, mask)
    return zbig @ caa @ zbig.T + np.diag(noise)


def random_params(rng: np.random.Generator, n: int, phi_max: float = 0.9) -> ModelParams:
    return ModelParams(
        phi=rng.uniform(-phi_max, phi_max),
        loadings=rng.normal(0.5, 0.5, size=(3, n, 4)),
        idio_var=rng.uniform(0.2, 2.0, size=(3, n)),
    )
