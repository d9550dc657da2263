"""Monte Carlo studies: random designs, replications and RMSE/Ave.se/Cove tables.

Each replication draws its own parameters and data from a seed derived
from ``(design.seed, rep)``, so a study gives the same table whether it
runs serially or in parallel.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .em import EmOptions, fit_mle_one_day, fit_qmle, fit_qmle_res
from .inference import se_numerical_hessian
from .md import fit_qmle_md
from .model import CONTINENTS, ModelParams, PanelLayout, simulate

log = logging.getLogger(__name__)

ESTIMATORS = ("mle-one-day", "qmle-res", "qmle-md")
Z95 = 1.959963984540054


class StudyAbortedError(RuntimeError):
    """More than the allowed share of replications failed."""


@dataclass(frozen=True)
class McDesign:
    """Settings of one Monte Carlo study.

    Parameters
    ----------
    N, T : int
        Assets per continent and number of one-third-day periods.
    phi : float
        AR(1) coefficient of the global factor.
    n_reps : int
        Number of replications.
    seed : int
        Master seed; replication ``r`` uses ``SeedSequence([seed, r])``.
    estimators : tuple of str
        Any of ``mle-one-day``, ``qmle-res`` and ``qmle-md``.
    max_iter : int
        EM iteration cap for every estimator.
    """

    N: int = 50
    T: int = 750
    phi: float = 0.3
    n_reps: int = 200
    seed: int = 0
    estimators: tuple[str, ...] = ("mle-one-day",)
    max_iter: int = 1000
    max_failure_rate: float = 0.05

    def __post_init__(self) -> None:
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if self.T < 6 or self.T % 6:
            raise ValueError("T must be a positive multiple of 6")
        if abs(self.phi) >= 1:
            raise ValueError("|phi| must be < 1")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        object.__setattr__(self, "estimators", tuple(self.estimators))


def rep_generators(design: McDesign, rep: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the parameters and the data of replication ``rep``."""
    ss = np.random.SeedSequence([design.seed, rep])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def draw_dgp(design: McDesign, rng: np.random.Generator | int) -> ModelParams:
    """Random structural parameters.

    Idiosyncratic variances are uniform on [0.2, 2] and loadings are
    ``0.6 a + 0.6 d - 0.2`` with ``a`` drawn per asset and ``d`` per
    continent and column, both uniform on [0, 1]. Within each continent
    the four assets with the smallest variances are moved to the front.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = design.N
    s2 = rng.uniform(0.2, 2.0, (3, n))
    d = rng.uniform(0.0, 1.0, (3, 1, 4))
    a = rng.uniform(0.0, 1.0, (3, n, 4))
    z = 0.6 * a + 0.6 * d - 0.2
    for c in range(3):
        low = np.argsort(s2[c], kind="stable")[:4]
        order = np.r_[low, np.setdiff1d(np.arange(n), low)]
        s2[c] = s2[c][order]
        z[c] = z[c][order]
    return ModelParams(design.phi, z, s2)


@dataclass
class RepRecord:
    """Estimates and standard errors of one replication for one estimator."""

    estimator: str
    estimate: np.ndarray  # ModelParams.to_vector layout
    se: np.ndarray


@dataclass
class MetricsReport:
    """RMSE, Ave.se and Cove per reported parameter group and estimator."""

    design: McDesign
    rows: tuple[str, ...]
    metrics: dict[str, dict[str, np.ndarray]]  # estimator -> {"rmse", "ave_se", "cove"}
    failures: dict[str, int]
    truth: np.ndarray  # (n_reps, n_params); nan rows for failed draws
    estimates: dict[str, np.ndarray] = field(default_factory=dict)
    ses: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def row(self, estimator: str, name: str) -> tuple[float, float, float]:
        i = self.rows.index(name)
        m = self.metrics[estimator]
        return float(m["rmse"][i]), float(m["ave_se"][i]), float(m["cove"][i])


def row_names() -> tuple[str, ...]:
    names = [f"z{c}_{j}" for c in CONTINENTS for j in range(4)]
    return tuple(names + ["Sigma_c", "phi"])


def _group_index(n: int) -> list[np.ndarray]:
    """Positions in ``ModelParams.to_vector`` of each reported group."""
    idx = np.arange(12 * n).reshape(3, n, 4)
    groups = [idx[c, :, j] for c in range(3) for j in range(4)]
    groups.append(np.arange(12 * n, 15 * n))
    groups.append(np.array([15 * n]))
    return groups


def _fit_one(estimator: str, panel, opts: EmOptions) -> tuple[np.ndarray, np.ndarray]:
    if estimator == "mle-one-day":
        fit = fit_mle_one_day(panel, opts=opts)
        rep = se_numerical_hessian(fit, panel, "mle-one-day")
    elif estimator == "qmle-res":
        fit = fit_qmle_res(panel, opts=opts)
        rep = se_numerical_hessian(fit, panel, "qmle-res")
    else:
        fit = fit_qmle(panel, opts=opts)
        params, info = fit_qmle_md(fit, panel.n_periods // 6)
        se = info["se"]
        return params.to_vector(), np.concatenate(
            [se["loadings"].ravel(), se["idio_var"].ravel(), [float(se["phi"])]]
        )
    se = rep.se
    return fit.params.to_vector(), np.concatenate(
        [se["loadings"].ravel(), se["idio_var"].ravel(), [float(se["phi"])]]
    )


def run_replication(design: McDesign, rep: int) -> tuple[np.ndarray, dict]:
    """Simulate replication ``rep`` and fit every requested estimator.

    Returns the true parameter vector and, per estimator, either a
    :class:`RepRecord` or the error message of the failure.
    """
    prng, drng = rep_generators(design, rep)
    truth = draw_dgp(design, prng)
    panel, _, _ = simulate(truth, PanelLayout(design.N, design.T), drng)
    opts = EmOptions(max_iter=design.max_iter)
    out = {}
    for est in design.estimators:
        try:
            value, se = _fit_one(est, panel, opts)
            out[est] = RepRecord(est, value, se)
        except (ArithmeticError, ValueError, RuntimeError) as err:  # LinAlgError is a ValueError
            log.warning("rep %d %s failed: %s", rep, est, err)
            out[est] = f"{type(err).__name__}: {err}"
    return truth.to_vector(), out


def _rep_task(args):
    return run_replication(*args)


def summarize(truth: np.ndarray, est: np.ndarray, se: np.ndarray, n: int) -> dict[str, np.ndarray]:
    """Group-averaged RMSE, Ave.se and Cove over the successful replications."""
    ok = ~np.isnan(est).any(axis=1)
    err = est[ok] - truth[ok]
    s = se[ok]
    rmse_each = np.sqrt(np.mean(err**2, axis=0))
    ave_each = np.mean(s, axis=0)
    cove_each = np.mean(np.abs(err) <= Z95 * s, axis=0)
    out = {"rmse": [], "ave_se": [], "cove": []}
    for g in _group_index(n):
        out["rmse"].append(rmse_each[g].mean())
        out["ave_se"].append(ave_each[g].mean())
        out["cove"].append(cove_each[g].mean())
    return {k: np.array(v) for k, v in out.items()}


def run_study(design: McDesign, n_jobs: int = 1, progress=None) -> MetricsReport:
    """Run all replications and aggregate them in replication order."""
    started = time.time()
    tasks = [(design, r) for r in range(design.n_reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_rep_task, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_rep_task(t))
            if progress:
                progress(len(results), design.n_reps)
    n_par = 15 * design.N + 1
    truth = np.array([r[0] for r in results])
    estimates, ses, failures, messages = {}, {}, {}, {}
    for est in design.estimators:
        e = np.full((design.n_reps, n_par), np.nan)
        s = np.full((design.n_reps, n_par), np.nan)
        msgs = {}
        for r, (_, recs) in enumerate(results):
            rec = recs[est]
            if isinstance(rec, RepRecord):
                e[r], s[r] = rec.estimate, rec.se
            else:
                msgs[r] = rec
        failures[est] = len(msgs)
        messages[est] = msgs
        if len(msgs) > design.max_failure_rate * design.n_reps:
            raise StudyAbortedError(f"{est}: {len(msgs)} of {design.n_reps} replications failed")
        estimates[est], ses[est] = e, s
    metrics = {est: summarize(truth, estimates[est], ses[est], design.N) for est in design.estimators}
    manifest = run_manifest(design)
    manifest["failures"] = {est: {str(k): v for k, v in messages[est].items()} for est in design.estimators}
    manifest["elapsed_seconds"] = round(time.time() - started, 1)
    return MetricsReport(design, row_names(), metrics, failures, truth, estimates, ses, manifest)


def run_manifest(design: McDesign) -> dict:
    """Design, seeding scheme and software versions of a study."""
    import numba
    import scipy

    from . import __version__

    return {
        "design": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(design).items()},
        "seeding": "numpy SeedSequence([seed, rep]) spawned into parameter and data streams",
        "standard_errors": {
            "mle-one-day": "numerical Hessian of the exact log-likelihood (heuristic)",
            "qmle-res": "numerical Hessian of the two-day pseudo-log-likelihood (heuristic)",
            "qmle-md": "minimum-distance sandwich with W = H^{-1}",
        },
        "versions": {
            "staggered_dfm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "python": platform.python_version(),
        },
    }


def emit_table(report: MetricsReport, fmt: str = "text") -> str:
    """Serialize the RMSE/Ave.se/Cove table as ``text``, ``csv`` or ``json``."""
    ests = report.design.estimators
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter"] + [f"{e}:{m}" for e in ests for m in ("rmse", "ave_se", "cove")])
        for i, name in enumerate(report.rows):
            w.writerow([name] + [f"{report.metrics[e][m][i]:.6f}" for e in ests for m in ("rmse", "ave_se", "cove")])
        return buf.getvalue()
    if fmt == "json":
        body = {
            "design": report.manifest.get("design", {}),
            "failures": report.failures,
            "rows": [
                {
                    "parameter": name,
                    **{
                        e: {m: round(float(report.metrics[e][m][i]), 6) for m in ("rmse", "ave_se", "cove")}
                        for e in ests
                    },
                }
                for i, name in enumerate(report.rows)
            ],
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"
    if fmt == "text":
        head = f"N={report.design.N}, T={report.design.T}, reps={report.design.n_reps}"
        cols = "".join(f"  {e:^26}" for e in ests)
        sub = "".join("  {:>8}{:>9}{:>9}".format("RMSE", "Ave.se", "Cove") for _ in ests)
        lines = [head, f"{'':10}{cols}", f"{'':10}{sub}"]
        for i, name in enumerate(report.rows):
            vals = "".join(
                "  {:8.4f}{:9.4f}{:9.4f}".format(*(report.metrics[e][m][i] for m in ("rmse", "ave_se", "cove")))
                for e in ests
            )
            lines.append(f"{name:10}{vals}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def read_table_csv(text: str) -> dict[str, dict[str, float]]:
    """Parse a table written by ``emit_table(..., "csv")``."""
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0][1:]
    return {r[0]: dict(zip(header, map(float, r[1:]))) for r in rows[1:]}
