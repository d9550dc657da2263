"""Minimum-distance refinement of the QMLE.

The QMLE uses only the identification restrictions; the structural model
implies many more. Selected QMLE entries ``h_hat`` are projected onto the
structural manifold by minimizing ``(h_hat - h(b))' W (h_hat - h(b))``
over a small structural parameter vector ``b``.

Selectors and parameter lists are tuples of small tagged tuples:

* selector items ``("lambda", k, j)`` (14 entries), ``("M", i, j)``,
  ``("vechM",)`` (105 entries) and ``("sigma2", k, j)``;
* parameter items ``("z", c, j)`` (4 entries, continent ``c`` in 0..2),
  ``("phi",)`` and ``("sigma2", c, j)``.

Block and asset indices ``k``, ``j`` and matrix indices are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em import FitResult
from .inference import (
    AsymptoticMachinery,
    LinearRepresentation,
    build_gamma,
    loading_representation,
    m_representation,
    sigma_representation,
    vech,
)
from .model import CONTINENTS, N_FACTORS, ModelParams, TwoDayParams, loading_columns, phi_matrix


class NonConvergenceError(RuntimeError):
    """Gauss-Newton did not converge."""


SelectorItem = tuple
ParamItem = tuple


def _block_continent(k: int) -> int:
    return (k - 1) % 3



def _param_size(item: ParamItem) -> int:
    return {"z": 4, "phi": 1, "sigma2": 1}[item[0]]


# --------------------------------------------------------------------------
# selector presets


def loading_selector(continent: int, j: int) -> tuple[tuple[SelectorItem, ...], tuple[ParamItem, ...]]:
    """Loadings of asset ``j`` of ``continent`` plus assets 1 and 5 of the others."""
    own = continent + 1
    items = [("lambda", own, j), ("lambda", own + 3, j)]
    params = [("z", continent, j)]
    for step in (1, 2):
        c = (continent + step) % 3
        for a in (1, 5):
            items += [("lambda", c + 1, a), ("lambda", c + 4, a)]
            params.append(("z", c, a))
    return tuple(items), tuple(params)


def phi_selector() -> tuple[tuple[SelectorItem, ...], tuple[ParamItem, ...]]:
    """First asset of every block plus ``vech(M)``."""
    items = tuple(("lambda", k, 1) for k in (1, 4, 2, 5, 3, 6)) + (("vechM",),)
    params = (("z", 0, 1), ("z", 1, 1), ("z", 2, 1), ("phi",))
    return items, params


def example_selector() -> tuple[tuple[SelectorItem, ...], tuple[ParamItem, ...]]:
    """A 59-entry, 10-parameter illustration mixing loadings, ``M`` and a variance."""
    items = (
        ("lambda", 1, 2), ("lambda", 4, 2), ("lambda", 3, 5), ("lambda", 6, 5),
        ("M", 1, 1), ("M", 2, 1), ("sigma2", 1, 5),
    )
    params = (("z", 0, 2), ("z", 2, 5), ("phi",), ("sigma2", 0, 5))
    return items, params


PRESETS = {"loading": loading_selector, "phi": phi_selector, "example": example_selector}


# --------------------------------------------------------------------------
# h and its derivative


def _validate(selector, params) -> None:
    if not selector:
        raise ValueError("empty selector")
    if len(set(selector)) != len(selector):
        raise ValueError("selector entries must be unique")
    if len(set(params)) != len(params):
        raise ValueError("parameter entries must be unique")
    for item in selector:
        if item[0] == "lambda":
            if not 1 <= item[1] <= 6 or item[2] < 1:
                raise IndexError(f"bad loading index {item}")
        elif item[0] == "M":
            if not (1 <= item[1] <= N_FACTORS and 1 <= item[2] <= N_FACTORS):
                raise IndexError(f"bad M index {item}")
        elif item[0] == "sigma2":
            if not 1 <= item[1] <= 6 or item[2] < 1:
                raise IndexError(f"bad variance index {item}")
        elif item[0] != "vechM":
            raise ValueError(f"unknown selector item {item}")


def assemble_h(two_day: TwoDayParams, selector) -> np.ndarray:
    """Pick the selected entries out of a two-day parameter set."""
    _validate(selector, ())
    n = two_day.n_assets
    out = []
    for item in selector:
        kind = item[0]
        if kind == "lambda":
            _, k, j = item
            if j > n:
                raise IndexError(f"asset {j} out of range")
            out.append(two_day.Lambda[(k - 1) * n + j - 1])
        elif kind == "M":
            out.append([two_day.M[item[1] - 1, item[2] - 1]])
        elif kind == "vechM":
            out.append(vech(two_day.M))
        else:
            _, k, j = item
            if j > n:
                raise IndexError(f"asset {j} out of range")
            out.append([two_day.Sigma_ee[(k - 1) * n + j - 1]])
    return np.concatenate(out)


def _unpack(theta: np.ndarray, params) -> dict:
    vals, pos = {}, 0
    for item in params:
        size = _param_size(item)
        vals[item] = theta[pos : pos + size]
        pos += size
    if pos != len(theta):
        raise ValueError("theta has the wrong length")
    return vals


def h_of_theta(theta, selector, params) -> np.ndarray:
    """Model-implied values of the selected entries."""
    theta = np.asarray(theta, dtype=float)
    vals = _unpack(theta, params)
    phi = float(vals[("phi",)][0]) if ("phi",) in vals else None
    if phi is not None and abs(phi) >= 1:
        raise ValueError("|phi| must be < 1")
    m = None
    if phi is not None:
        m = np.eye(N_FACTORS)
        m[:8, :8] = phi_matrix(phi)
    out = []
    for item in selector:
        kind = item[0]
        if kind == "lambda":
            _, k, j = item
            key = ("z", _block_continent(k), j)
            if key not in vals:
                raise KeyError(f"{item} needs parameter {key}")
            row = np.zeros(N_FACTORS)
            row[list(loading_columns(k))] = vals[key]
            out.append(row)
        elif kind in ("M", "vechM"):
            if m is None:
                raise KeyError(f"{item} needs phi")
            out.append([m[item[1] - 1, item[2] - 1]] if kind == "M" else vech(m))
        else:
            _, k, j = item
            key = ("sigma2", _block_continent(k), j)
            if key not in vals:
                raise KeyError(f"{item} needs parameter {key}")
            out.append(vals[key])
    return np.concatenate(out)


def jacobian_h(theta, selector, params) -> np.ndarray:
    """Central-difference Jacobian of :func:`h_of_theta`, Richardson-refined once."""
    theta = np.asarray(theta, dtype=float)
    step = 1e-6 * np.maximum(1.0, np.abs(theta))

    def central(scale):
        cols = []
        for i in range(len(theta)):
            e = np.zeros(len(theta))
            e[i] = scale * step[i]
            cols.append((h_of_theta(theta + e, selector, params) - h_of_theta(theta - e, selector, params))
                        / (2 * scale * step[i]))
        return np.array(cols).T

    return (4.0 * central(0.5) - central(1.0)) / 3.0


# --------------------------------------------------------------------------
# covariance of h_hat


def h_representation(mach: AsymptoticMachinery, selector) -> LinearRepresentation:
    """Joint first-order representation of the selected QMLE entries."""
    n = mach.n_assets
    parts = []
    m_rep = None
    for item in selector:
        kind = item[0]
        if kind == "lambda":
            parts.append(loading_representation(mach, item[1], item[2]))
        elif kind in ("vechM", "M"):
            m_rep = m_rep or m_representation(mach)
            if kind == "vechM":
                parts.append(m_rep)
            else:
                i, j = sorted((item[1], item[2]), reverse=True)
                # position of (i, j), i >= j, in the column-major lower triangle
                pos = sum(N_FACTORS - c for c in range(j - 1)) + (i - j)
                parts.append(LinearRepresentation(
                    m_rep.x_coef[[pos]], m_rep.u_coef[[pos]], m_rep.s_coef[[pos]]))
        else:
            parts.append(sigma_representation(mach, [(item[1] - 1) * n + item[2] - 1]))
    return LinearRepresentation.stack(parts)


def estimate_H(two_day: TwoDayParams, selector, T_f: int, mach: AsymptoticMachinery | None = None,
               ridge: bool = True) -> tuple[np.ndarray, dict]:
    """Asymptotic covariance ``H`` of ``sqrt(T_f) h_hat`` with plug-in values.

    Returns ``H`` (not divided by ``T_f``) and a flag dict. With ``ridge``
    a ridge ``1e-8 * trace / c1`` is added and flagged when ``H`` is not PD.
    """
    _validate(selector, ())
    mach = mach or build_gamma(two_day, T_f)
    h_cov = h_representation(mach, selector).covariance(mach) * mach.T_f
    flags = {"ridge": False}
    if ridge:
        h_cov, flags["ridge"] = _ridge_if_singular(h_cov)
    return h_cov, flags


def _ridge_if_singular(h_cov: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        np.linalg.cholesky(h_cov)
        return h_cov, False
    except np.linalg.LinAlgError:
        eps = 1e-8 * np.trace(h_cov) / len(h_cov)
        return h_cov + eps * np.eye(len(h_cov)), True


def informative_entries(rep: LinearRepresentation, rel_tol: float = 1e-8) -> np.ndarray:
    """Indices of the selected entries that carry sampling variation of their own.

    An entry fixed by an identification restriction has an all-zero row in
    the linear representation, and entries tied by an equality share the
    same row; the first copy is kept. The decision uses the coefficient
    rows rather than ``H`` itself because ``H`` can be numerically near
    singular when the restrictions identify the rotation only weakly.
    """
    n = len(rep.x_coef)
    rows = np.hstack([rep.x_coef, rep.u_coef.reshape(n, -1), np.reshape(rep.s_coef, (n, -1))])
    norms = np.linalg.norm(rows, axis=1)
    live = norms[norms > 0]
    zero_tol = rel_tol * max(1.0, float(np.median(live))) if live.size else 0.0
    keep: list[int] = []
    for i in range(n):
        if norms[i] <= zero_tol:
            continue
        if any(np.linalg.norm(rows[i] - rows[k]) <= rel_tol * norms[i] for k in keep):
            continue
        keep.append(i)
    return np.array(keep, dtype=int)


# --------------------------------------------------------------------------
# the minimum-distance solve


@dataclass
class MinimumDistanceProblem:
    h_hat: np.ndarray
    selector: tuple
    params: tuple
    weight: np.ndarray
    H_cov: np.ndarray
    T_f: int
    keep: np.ndarray | None = None  # entries of h_hat that enter the objective

    def __post_init__(self) -> None:
        c1 = len(self.h_hat)
        if self.weight.shape != (c1, c1) or self.H_cov.shape != (c1, c1):
            raise ValueError("weight and H_cov must be c1 x c1")
        if self.keep is None:
            self.keep = np.arange(c1)


@dataclass
class MdResult:
    theta_check: np.ndarray
    O_cov: np.ndarray
    objective_at_optimum: float
    n_iter: int
    params: tuple
    flags: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.O_cov), 0.0))


def _objective(problem, theta):
    r = (problem.h_hat - h_of_theta(theta, problem.selector, problem.params))[problem.keep]
    return float(r @ problem.weight[np.ix_(problem.keep, problem.keep)] @ r)


def solve_md(problem: MinimumDistanceProblem, start: np.ndarray, max_iter: int = 200,
             tol: float = 1e-10) -> MdResult:
    """Gauss-Newton with step halving from ``start``."""
    keep = problem.keep
    w = problem.weight[np.ix_(keep, keep)]
    theta = np.asarray(start, dtype=float).copy()
    obj = _objective(problem, theta)
    jac = jacobian_h(theta, problem.selector, problem.params)[keep]
    if np.linalg.matrix_rank(jac) < jac.shape[1]:
        raise np.linalg.LinAlgError("Jacobian of h does not have full column rank")
    for it in range(1, max_iter + 1):
        r = (problem.h_hat - h_of_theta(theta, problem.selector, problem.params))[keep]
        jw = jac.T @ w
        step = np.linalg.solve(jw @ jac, jw @ r)
        # halve until the objective falls, then keep halving while it falls
        # further; plain first-decrease steps zig-zag along curved valleys
        trial, new = theta, obj
        t = 1.0
        while t >= 1e-10:
            cand = theta + t * step
            try:
                val = _objective(problem, cand)
            except ValueError:
                val = np.inf
            if val < new:
                trial, new = cand, val
            elif new < obj:
                break
            t *= 0.5
        done = np.max(np.abs(trial - theta)) < tol * (1 + np.max(np.abs(theta))) or obj - new <= tol * max(obj, 1e-300)
        theta, obj = trial, new
        jac = jacobian_h(theta, problem.selector, problem.params)[keep]
        if done:
            break
    else:
        raise NonConvergenceError("minimum distance did not converge in max_iter iterations")
    h_cov = problem.H_cov[np.ix_(keep, keep)]
    bread = np.linalg.inv(jac.T @ w @ jac)
    o_cov = bread @ jac.T @ w @ h_cov @ w @ jac @ bread / problem.T_f
    return MdResult(theta, 0.5 * (o_cov + o_cov.T), obj, it, problem.params)


def structural_start(two_day: TwoDayParams, params) -> np.ndarray:
    """Read structural values off a two-day parameter set (averaging day copies)."""
    n = two_day.n_assets
    out = []
    for item in params:
        if item[0] == "z":
            _, c, j = item
            rows = [two_day.Lambda[(k - 1) * n + j - 1, list(loading_columns(k))] for k in (c + 1, c + 4)]
            out.append(0.5 * (rows[0] + rows[1]))
        elif item[0] == "phi":
            m12 = float(np.clip(0.5 * (two_day.M[0, 1] + two_day.M[1, 0]), -50.0, 50.0))
            out.append([(np.sqrt(1.0 + 4.0 * m12 * m12) - 1.0) / (2.0 * m12) if m12 else 0.0])
        else:
            _, c, j = item
            out.append([0.5 * (two_day.Sigma_ee[c * n + j - 1] + two_day.Sigma_ee[(c + 3) * n + j - 1])])
    return np.concatenate(out)


def md_problem(two_day: TwoDayParams, selector, params, T_f: int, weight: str = "efficient",
               mach: AsymptoticMachinery | None = None):
    """Set up one problem with ``W = H^{-1}`` (``"efficient"``) or ``W = I``.

    Entries with no sampling variation of their own (fixed by a restriction
    or duplicated by an equality) are dropped before weighting; the ridge
    fallback is applied only if what remains is still singular.
    """
    _validate(selector, params)
    h_hat = assemble_h(two_day, selector)
    mach = mach or build_gamma(two_day, T_f)
    rep = h_representation(mach, selector)
    h_cov = rep.covariance(mach) * mach.T_f
    keep = informative_entries(rep)
    sub, ridged = _ridge_if_singular(h_cov[np.ix_(keep, keep)])
    h_cov[np.ix_(keep, keep)] = sub
    w = np.zeros_like(h_cov)
    if weight == "efficient":
        w[np.ix_(keep, keep)] = np.linalg.inv(sub)
    elif weight == "identity":
        w[np.ix_(keep, keep)] = np.eye(len(keep))
    else:
        raise ValueError(f"unknown weight {weight!r}")
    flags = {"ridge": ridged, "n_dropped": int(len(h_hat) - len(keep)), "weight": weight}
    return MinimumDistanceProblem(h_hat, tuple(selector), tuple(params), w, h_cov, T_f, keep), flags


def solve_preset(two_day: TwoDayParams, selector, params, T_f: int, weight: str = "efficient",
                 mach: AsymptoticMachinery | None = None) -> MdResult:
    problem, flags = md_problem(two_day, selector, params, T_f, weight, mach)
    res = solve_md(problem, structural_start(two_day, params))
    res.flags.update(flags)
    return res


def fit_qmle_md(qmle: FitResult, T_f: int, weight: str = "efficient") -> tuple[ModelParams, dict]:
    """Structural estimates and standard errors from a QMLE fit.

    Loadings come from one problem per asset, ``phi`` from its own problem
    and each idiosyncratic variance is the average of its two day copies
    in the QMLE.
    """
    td = qmle.params
    if not isinstance(td, TwoDayParams):
        raise TypeError("qmle-md needs a QMLE fit")
    n = td.n_assets
    mach = build_gamma(td, T_f)
    z = np.empty((3, n, 4))
    z_se = np.empty((3, n, 4))
    n_ridge = 0
    for c in range(3):
        for j in range(1, n + 1):
            sel, par = loading_selector(c, j)
            res = solve_preset(td, sel, par, T_f, weight, mach)
            z[c, j - 1] = res.theta_check[:4]
            z_se[c, j - 1] = res.se[:4]
            n_ridge += res.flags["ridge"]
    sel, par = phi_selector()
    res = solve_preset(td, sel, par, T_f, weight, mach)
    phi, phi_se = float(res.theta_check[-1]), float(res.se[-1])
    n_ridge += res.flags["ridge"]
    psi = td.Sigma_ee.reshape(6, n)
    s2 = 0.5 * (psi[:3] + psi[3:])
    # the two day copies are asymptotically independent
    s2_se = np.sqrt(s2**2 / T_f)
    params = ModelParams(phi, z, s2)
    se = {"loadings": z_se, "idio_var": s2_se, "phi": np.array(phi_se)}
    return params, {"se": se, "ridge_count": n_ridge, "weight": weight, "continents": CONTINENTS}
