"""Core model objects: parameters, panel layout, both state representations.

Time is measured in thirds of a day. Period ``t = 1, 2, 3, ...`` is the
close of Asia (A), Europe (E) and the US (U) in turn, so continent
``(t - 1) % 3`` closes at period ``t``. Arrays are 0-based throughout: row
``s`` of a panel holds period ``t = s + 1``.

The one-day state is ``alpha_t = (fg_t, fg_{t-1}, fg_{t-2}, fc_t)`` where
``fg`` is the AR(1) global factor and ``fc`` the white-noise continental
factor. Stacking six consecutive periods gives the two-day representation
with a 6N x 14 loading matrix and factor covariance ``blockdiag(Phi, I_6)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONTINENTS: tuple[str, str, str] = ("A", "E", "U")
N_FACTORS = 14
STATE_DIM = 4
SHOCK_DIM = 2


class InvalidParameterError(ValueError):
    """Raised when model parameters violate their invariants."""


class DegenerateSeriesError(ValueError):
    """Raised when a return series has no variation."""


@dataclass(frozen=True)
class PanelLayout:
    """Shape of a three-continent panel.

    Parameters
    ----------
    n_assets : int
        Assets per continent (equal across continents).
    n_periods : int
        Number of one-third-day periods ``T``; must be a multiple of 6.
    """

    n_assets: int
    n_periods: int

    def __post_init__(self) -> None:
        if self.n_assets < 1:
            raise ValueError("n_assets must be positive")
        if self.n_periods < 6 or self.n_periods % 6:
            raise ValueError("n_periods must be a positive multiple of 6")

    @property
    def n_blocks(self) -> int:
        """Number of two-day blocks ``T / 6``."""
        return self.n_periods // 6

    def continent_of_period(self, t: int) -> str:
        """Continent closing at 1-based period ``t``."""
        if not 1 <= t <= self.n_periods:
            raise IndexError(f"period {t} outside 1..{self.n_periods}")
        return CONTINENTS[(t - 1) % 3]

    def periods_of(self, continent: str) -> np.ndarray:
        """0-based row indices of the periods where ``continent`` closes."""
        c = CONTINENTS.index(continent)
        return np.arange(c, self.n_periods, 3)


@dataclass(frozen=True)
class ModelParams:
    """Structural parameters.

    Attributes
    ----------
    phi : float
        AR(1) coefficient of the global factor.
    loadings : ndarray, shape (3, N, 4)
        ``loadings[c, i] = (z0, z1, z2, z3)`` for asset ``i`` of continent
        ``c``: loadings on ``fg_t``, ``fg_{t-1}``, ``fg_{t-2}`` and ``fc_t``.
    idio_var : ndarray, shape (3, N)
        Idiosyncratic variances.
    """

    phi: float
    loadings: np.ndarray
    idio_var: np.ndarray

    def __post_init__(self) -> None:
        lo = np.array(self.loadings, dtype=float)
        iv = np.array(self.idio_var, dtype=float)
        if lo.ndim != 3 or lo.shape[0] != 3 or lo.shape[2] != 4:
            raise InvalidParameterError("loadings must have shape (3, N, 4)")
        if iv.shape != lo.shape[:2]:
            raise InvalidParameterError("idio_var must have shape (3, N)")
        phi = float(self.phi)
        if not np.isfinite(phi) or abs(phi) >= 1.0:
            raise InvalidParameterError(f"|phi| must be < 1, got {phi}")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(iv)):
            raise InvalidParameterError("parameters must be finite")
        if np.any(iv <= 0):
            raise InvalidParameterError("idiosyncratic variances must be positive")
        lo.setflags(write=False)
        iv.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "loadings", lo)
        object.__setattr__(self, "idio_var", iv)

    @property
    def n_assets(self) -> int:
        return self.loadings.shape[1]

    def to_vector(self) -> np.ndarray:
        """Free coordinates ``(loadings, idio_var, phi)`` as one flat vector."""
        return np.concatenate([self.loadings.ravel(), self.idio_var.ravel(), [self.phi]])

    @classmethod
    def from_vector(cls, theta: np.ndarray, n_assets: int) -> "ModelParams":
        n_load = 3 * n_assets * 4
        theta = np.asarray(theta, dtype=float)
        if theta.size != n_load + 3 * n_assets + 1:
            raise InvalidParameterError("parameter vector has the wrong length")
        return cls(
            phi=theta[-1],
            loadings=theta[:n_load].reshape(3, n_assets, 4),
            idio_var=theta[n_load:-1].reshape(3, n_assets),
        )

    def replace(self, **changes) -> "ModelParams":
        kw = {"phi": self.phi, "loadings": self.loadings, "idio_var": self.idio_var}
        kw.update(changes)
        return ModelParams(**kw)


@dataclass(frozen=True)
class ReturnPanel:
    """Observed returns, one row per period.

    ``values[s]`` holds the N returns of the continent closing at period
    ``s + 1``; ``mask[s, i]`` is True when that return is observed.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        m = np.array(self.mask, dtype=bool)
        if v.ndim != 2 or v.shape != m.shape:
            raise ValueError("values and mask must be 2-D arrays of equal shape")
        v = np.where(m, v, 0.0)
        if not np.all(np.isfinite(v)):
            raise ValueError("observed returns must be finite")
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @classmethod
    def complete(cls, values: np.ndarray) -> "ReturnPanel":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def n_periods(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]

    @property
    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def layout(self) -> PanelLayout:
        return PanelLayout(self.n_assets, self.n_periods)


@dataclass(frozen=True)
class StateSpaceSystem:
    """One-day state-space system with period-dependent observation rows."""

    transition: np.ndarray
    noise_loading: np.ndarray
    obs_matrices: np.ndarray  # (3, N, 4)
    obs_noise: np.ndarray  # (3, N)
    state_dim: int = STATE_DIM
    shock_dim: int = SHOCK_DIM

    @property
    def phi(self) -> float:
        return float(self.transition[0, 0])

    def obs_matrix_of_period(self, t: int) -> np.ndarray:
        """Observation matrix ``Z^c`` for 1-based period ``t``."""
        return self.obs_matrices[(t - 1) % 3]

    def obs_noise_of_period(self, t: int) -> np.ndarray:
        """Diagonal of the observation noise covariance at period ``t``."""
        return self.obs_noise[(t - 1) % 3]


@dataclass(frozen=True)
class TwoDayParams:
    """Stacked two-day representation ``y = Lambda f + e``.

    Row ``(k - 1) * N + (j - 1)`` of ``Lambda`` belongs to day-block ``k``
    (1..6) and asset ``j`` (1..N). Blocks 1..6 are A, E, U of the first day
    followed by A, E, U of the second day.
    """

    Lambda: np.ndarray
    M: np.ndarray
    Sigma_ee: np.ndarray

    def __post_init__(self) -> None:
        lam = np.array(self.Lambda, dtype=float)
        m = np.array(self.M, dtype=float)
        s = np.array(self.Sigma_ee, dtype=float)
        if lam.ndim != 2 or lam.shape[1] != N_FACTORS or lam.shape[0] % 6:
            raise InvalidParameterError("Lambda must be 6N x 14")
        if m.shape != (N_FACTORS, N_FACTORS):
            raise InvalidParameterError("M must be 14 x 14")
        if s.shape != (lam.shape[0],):
            raise InvalidParameterError("Sigma_ee must have length 6N")
        if np.any(s <= 0):
            raise InvalidParameterError("Sigma_ee must be positive")
        for a in (lam, m, s):
            a.setflags(write=False)
        object.__setattr__(self, "Lambda", lam)
        object.__setattr__(self, "M", m)
        object.__setattr__(self, "Sigma_ee", s)

    @property
    def n_assets(self) -> int:
        return self.Lambda.shape[0] // 6

    def row(self, k: int, j: int) -> int:
        """0-based row of block ``k`` (1..6) and asset ``j`` (1..N)."""
        n = self.n_assets
        if not (1 <= k <= 6 and 1 <= j <= n):
            raise IndexError(f"(k={k}, j={j}) out of range")
        return (k - 1) * n + (j - 1)

    def block_asset(self, m: int) -> tuple[int, int]:
        """Inverse of :meth:`row`: 1-based ``(k, j)`` of 0-based row ``m``."""
        n = self.n_assets
        return m // n + 1, m % n + 1

    def lam(self, k: int, j: int) -> np.ndarray:
        """Loading row ``lambda_{k,j}`` (length 14)."""
        return self.Lambda[self.row(k, j)]

    def sigma2(self, k: int, j: int) -> float:
        return float(self.Sigma_ee[self.row(k, j)])

    def replace(self, **changes) -> "TwoDayParams":
        kw = {"Lambda": self.Lambda, "M": self.M, "Sigma_ee": self.Sigma_ee}
        kw.update(changes)
        return TwoDayParams(**kw)


@dataclass(frozen=True)
class DecompositionReport:
    """Per-asset variance components, each of shape (3, N)."""

    var_global: np.ndarray
    var_continental: np.ndarray
    var_idiosyncratic: np.ndarray
    total: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "total", self.var_global + self.var_continental + self.var_idiosyncratic
        )

    def shares(self) -> dict[str, np.ndarray]:
        return {
            "global": self.var_global / self.total,
            "continental": self.var_continental / self.total,
            "idiosyncratic": self.var_idiosyncratic / self.total,
        }


# --------------------------------------------------------------------------
# builders


def transition_matrix(phi: float) -> np.ndarray:
    tm = np.zeros((4, 4))
    tm[0, 0] = phi
    tm[1, 0] = 1.0
    tm[2, 1] = 1.0
    return tm


def noise_loading() -> np.ndarray:
    r = np.zeros((4, 2))
    r[0, 0] = 1.0
    r[3, 1] = 1.0
    return r


def stationary_state_cov(phi: float) -> np.ndarray:
    """Unconditional covariance of the one-day state.

    Solves ``vec V = (I - T kron T)^{-1} (R kron R) vec I_2``.
    """
    if abs(phi) >= 1:
        raise np.linalg.LinAlgError("no stationary distribution for |phi| >= 1")
    tm = transition_matrix(phi)
    r = noise_loading()
    lhs = np.eye(16) - np.kron(tm, tm)
    rhs = np.kron(r, r) @ np.eye(2).ravel(order="F")
    v = np.linalg.solve(lhs, rhs).reshape(4, 4, order="F")
    return 0.5 * (v + v.T)


def phi_matrix(phi: float, size: int = 8) -> np.ndarray:
    """Toeplitz AR(1) covariance ``phi^|i-j| / (1 - phi^2)``."""
    idx = np.arange(size)
    return phi ** np.abs(idx[:, None] - idx[None, :]) / (1.0 - phi * phi)


def factor_cov(phi: float) -> np.ndarray:
    """Two-day factor covariance ``blockdiag(Phi, I_6)``."""
    m = np.eye(N_FACTORS)
    m[:8, :8] = phi_matrix(phi)
    return m


def loading_columns(k: int) -> tuple[int, int, int, int]:
    """0-based Lambda columns of (z0, z1, z2, z3) in day-block ``k`` (1..6)."""
    if not 1 <= k <= 6:
        raise IndexError("block k must be in 1..6")
    return 6 - k, 7 - k, 8 - k, 14 - k


def continent_of_block(k: int) -> int:
    """Continent index (0=A, 1=E, 2=U) of day-block ``k``."""
    return (k - 1) % 3


def build_state_space(params: ModelParams, layout: PanelLayout | None = None) -> StateSpaceSystem:
    """Switching one-day state-space form of ``params``."""
    if layout is not None and layout.n_assets != params.n_assets:
        raise InvalidParameterError("layout and params disagree on N")
    return StateSpaceSystem(
        transition=transition_matrix(params.phi),
        noise_loading=noise_loading(),
        obs_matrices=params.loadings.copy(),
        obs_noise=params.idio_var.copy(),
    )


def build_two_day(params: ModelParams, layout: PanelLayout | None = None) -> TwoDayParams:
    """Stacked two-day representation of ``params``."""
    n = params.n_assets
    if layout is not None and layout.n_assets != n:
        raise InvalidParameterError("layout and params disagree on N")
    lam = np.zeros((6 * n, N_FACTORS))
    sig = np.empty(6 * n)
    for k in range(1, 7):
        c = continent_of_block(k)
        rows = slice((k - 1) * n, k * n)
        lam[rows, list(loading_columns(k))] = params.loadings[c]
        sig[rows] = params.idio_var[c]
    return TwoDayParams(lam, factor_cov(params.phi), sig)


def implied_covariance(two_day: TwoDayParams) -> np.ndarray:
    """``Lambda M Lambda' + diag(Sigma_ee)``."""
    lam = two_day.Lambda
    cov = lam @ two_day.M @ lam.T
    cov[np.diag_indices_from(cov)] += two_day.Sigma_ee
    return 0.5 * (cov + cov.T)


def stack_two_day(panel: ReturnPanel) -> np.ndarray:
    """Two-day stacks as a ``(T/6, 6N)`` array."""
    t, n = panel.values.shape
    if t % 6:
        raise ValueError("panel length must be a multiple of 6")
    return panel.values.reshape(t // 6, 6 * n)


def stack_factors(fg: np.ndarray, fc: np.ndarray) -> np.ndarray:
    """Arrange factor paths into the ``(T/6, 14)`` two-day factor vectors.

    Block ``k`` of a two-day stack loads ``fg`` at lags 0, 1, 2 in columns
    ``6-k``, ``7-k``, ``8-k`` and ``fc`` in column ``14-k``. The two lags of
    ``fg`` before the first period are unknown and come out as ``nan``.
    """
    fg = np.asarray(fg, dtype=float)
    fc = np.asarray(fc, dtype=float)
    if fg.shape != fc.shape or fg.ndim != 1 or len(fg) % 6:
        raise ValueError("fg and fc must be equal-length paths with a multiple of 6 periods")
    padded = np.r_[np.nan, np.nan, fg]
    out = np.empty((len(fg) // 6, N_FACTORS))
    for k in range(1, 7):
        s = np.arange(k - 1, len(fg), 6)
        cols = loading_columns(k)
        for lag in range(3):
            out[:, cols[lag]] = padded[s + 2 - lag]
        out[:, cols[3]] = fc[s]
    return out


def variance_decomposition(params: ModelParams) -> DecompositionReport:
    """Split each return's variance into global, continental, idiosyncratic parts."""
    v = stationary_state_cov(params.phi)
    z = params.loadings
    glob = np.einsum("cij,jk,cik->ci", z[..., :3], v[:3, :3], z[..., :3])
    cont = z[..., 3] ** 2 * v[3, 3]
    return DecompositionReport(glob, cont, params.idio_var.copy())


def interpretation_scalars(params: ModelParams) -> np.ndarray:
    """Loadings in units of the global factor's standard deviation.

    Global loadings are scaled by ``1 / sqrt(1 - phi^2)``; the continental
    factor already has unit variance.
    """
    out = params.loadings.copy()
    out[..., :3] /= np.sqrt(1.0 - params.phi**2)
    return out


def simulate(
    params: ModelParams,
    layout: PanelLayout,
    seed: int | np.random.Generator,
    burn_in: int = 60,
) -> tuple[ReturnPanel, np.ndarray, np.ndarray]:
    """Simulate a complete panel.

    Factors start at zero and the first ``burn_in`` periods are discarded.
    ``burn_in`` must be a multiple of 3 so the continent cycle still starts
    at Asia.

    Returns
    -------
    panel, fg, fc
        ``fg`` and ``fc`` are the global and continental factor paths
        aligned with the panel rows.
    """
    if layout.n_assets != params.n_assets:
        raise InvalidParameterError("layout and params disagree on N")
    if burn_in < 0 or burn_in % 3:
        raise ValueError("burn_in must be a non-negative multiple of 3")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, total = params.n_assets, layout.n_periods + burn_in
    eta = rng.standard_normal((total, 2))
    eps = rng.standard_normal((total, n))

    fg = np.empty(total + 2)  # two leading zeros hold fg_{-1}, fg_0
    fg[:2] = 0.0
    for s in range(total):
        fg[s + 2] = params.phi * fg[s + 1] + eta[s, 0]
    fc = eta[:, 1]

    y = np.empty((total, n))
    for c in range(3):
        rows = np.arange(c, total, 3)
        state = np.column_stack([fg[rows + 2], fg[rows + 1], fg[rows], fc[rows]])
        y[rows] = state @ params.loadings[c].T + eps[rows] * np.sqrt(params.idio_var[c])
    keep = slice(burn_in, total)
    return ReturnPanel.complete(y[keep]), fg[2:][keep].copy(), fc[keep].copy()


def standardize_returns(panel: ReturnPanel) -> tuple[ReturnPanel, np.ndarray, np.ndarray]:
    """Demean and scale each (continent, asset) series to unit sample variance.

    Returns the standardized panel plus ``(mean, scale)`` arrays of shape
    (3, N) for back-transformation.
    """
    n = panel.n_assets
    values = np.array(panel.values)
    means = np.empty((3, n))
    scales = np.empty((3, n))
    for c in range(3):
        rows = np.arange(c, panel.n_periods, 3)
        v, m = panel.values[rows], panel.mask[rows]
        cnt = m.sum(axis=0)
        if np.any(cnt < 2):
            raise DegenerateSeriesError("each series needs at least two observations")
        mu = np.where(m, v, 0.0).sum(axis=0) / cnt
        dev = np.where(m, v - mu, 0.0)
        sd = np.sqrt((dev**2).sum(axis=0) / (cnt - 1))
        if np.any(sd <= 1e-12 * np.maximum(1.0, np.abs(mu))):
            bad = [f"{CONTINENTS[c]}{i + 1}" for i in np.flatnonzero(sd <= 1e-12 * np.maximum(1.0, np.abs(mu)))]
            raise DegenerateSeriesError(f"constant return series: {', '.join(bad)}")
        values[rows] = np.where(m, dev / sd, 0.0)
        means[c], scales[c] = mu, sd
    return ReturnPanel(values, panel.mask), means, scales
