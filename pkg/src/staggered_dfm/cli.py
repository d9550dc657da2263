"""Command-line interface ``staggered-dfm``.

Every command writes its outputs atomically into ``--out`` and exits with
status 0. Failures print a JSON error document on stderr and exit with
status 1 (2 for usage errors, as click does).
"""

from __future__ import annotations

import csv
import io as _io
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import io
from .em import EmOptions, extract_factors_gls, fit_mle_one_day, fit_qmle, fit_qmle_res
from .inference import build_gamma, se_gls_factors, se_numerical_hessian, se_qmle
from .md import fit_qmle_md
from .model import (
    CONTINENTS,
    ModelParams,
    PanelLayout,
    TwoDayParams,
    interpretation_scalars,
    simulate,
    standardize_returns,
    variance_decomposition,
)
from .montecarlo import McDesign, emit_table, run_study


class _Failure(click.ClickException):
    def __init__(self, err: BaseException):
        super().__init__(str(err))
        self.err = err

    def show(self, file=None) -> None:
        click.echo(json.dumps(io.error_document(self.err), sort_keys=True), err=True)


def _guard(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as err:  # reported as JSON, never as a traceback
            raise _Failure(err) from err

    return wrapper


def _config(config_path, **overrides) -> io.RunConfig:
    base = io.RunConfig.from_file(config_path) if config_path else io.RunConfig()
    return base.merged(**overrides)


def _progress(msg: str) -> None:
    click.echo(msg, err=True)


def _se_vector_doc(se: dict) -> dict:
    doc = {}
    for key, val in se.items():
        val = np.asarray(val, dtype=float)
        if key == "loadings":
            doc[key] = {c: {f"z{j}": io._clean(val[i, :, j]) for j in range(4)} for i, c in enumerate(CONTINENTS)}
        elif key == "idio_var":
            doc[key] = {c: io._clean(val[i]) for i, c in enumerate(CONTINENTS)}
        else:
            doc[key] = io._clean(val)
    return doc


def _summary_table(params: ModelParams, se: dict | None, registry: io.AssetRegistry) -> str:
    scaled = interpretation_scalars(params)
    lines = [
        f"phi = {params.phi:.4f}" + (f" (se {float(se['phi']):.4f})" if se else ""),
        "loadings per one-standard-deviation move of each factor",
        f"{'continent':9} {'asset':12} {'z0':>8} {'z1':>8} {'z2':>8} {'z3':>8} {'sigma2':>8}",
    ]
    for i, c in enumerate(CONTINENTS):
        for j, name in enumerate(registry.assets[c]):
            vals = " ".join(f"{v:8.3f}" for v in scaled[i, j])
            lines.append(f"{c:9} {name:12} {vals} {params.idio_var[i, j]:8.3f}")
    return "\n".join(lines) + "\n"


@click.group()
@click.version_option(package_name="staggered-dfm")
def main() -> None:
    """Dynamic factor model for returns observed at staggered closing times."""


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--estimator", type=click.Choice(io.ESTIMATOR_CHOICES), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--units", type=click.Choice(["decimal", "percent"]), default=None)
@click.option("--missing", type=click.Choice(["mask", "drop-day"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-iter", type=int, default=None)
@click.option("--standardize/--no-standardize", default=None)
@click.option("--no-se", is_flag=True, help="Skip standard errors.")
@_guard
def fit(input_path, estimator, config_path, out, units, missing, seed, max_iter, standardize, no_se):
    """Fit the model to a long-format return CSV and write params.json and se.json."""
    cfg = _config(config_path, estimator=estimator, out=out, units=units, missing=missing,
                  seed=seed, max_iter=max_iter, standardize=standardize)
    panel, _, registry = io.ingest(input_path, cfg)
    if cfg.standardize:
        panel, _, _ = standardize_returns(panel)
    opts = EmOptions(max_iter=cfg.max_iter, rel_tol=cfg.rel_tol, param_tol=cfg.param_tol)
    outdir = Path(cfg.out)
    _progress(f"fitting {cfg.estimator} on N={panel.n_assets}, T={panel.n_periods}")
    se_doc = None
    if cfg.estimator == "mle-one-day":
        res = fit_mle_one_day(panel, opts=opts)
        params = res.params
        if not no_se:
            rep = se_numerical_hessian(res, panel, "mle-one-day")
            se_doc = {"method": rep.method, "se": _se_vector_doc(rep.se), "flags": rep.flags}
    elif cfg.estimator == "qmle-res":
        res = fit_qmle_res(panel, opts=opts)
        params = res.params
        if not no_se:
            rep = se_numerical_hessian(res, panel, "qmle-res")
            se_doc = {"method": rep.method, "se": _se_vector_doc(rep.se), "flags": rep.flags}
    elif cfg.estimator == "qmle":
        res = fit_qmle(panel, opts=opts)
        params = res.params
        if not no_se:
            rep = se_qmle(res, panel)
            se_doc = {"method": rep.method, "se": {k: io._clean(v) for k, v in rep.se.items()}, "flags": rep.flags}
    else:
        res = fit_qmle(panel, opts=opts)
        params, info = fit_qmle_md(res, panel.n_periods // 6, cfg.md_weight)
        se_doc = {"method": "analytic-MD", "se": _se_vector_doc(info["se"]),
                  "flags": {"ridge_count": info["ridge_count"], "weight": info["weight"]}}
    meta = {
        "estimator": cfg.estimator,
        "converged": bool(res.converged),
        "n_iter": int(res.n_iter),
        "loglik": float(res.loglik),
        "foc_residual": None if res.foc_residual is None else float(res.foc_residual),
        "standardized": cfg.standardize,
        "units": cfg.units,
        "missing": cfg.missing,
        "dropped_dates": list(registry.dropped_dates),
        "missing_rate": registry.missing_rate,
    }
    doc = io.params_to_dict(params, registry)
    io.validate(doc, "params")
    io.atomic_write(outdir / "params.json", io.dumps(doc))
    io.atomic_write(outdir / "fit.json", io.dumps(meta))
    if se_doc is not None:
        io.validate(se_doc, "se")
        io.atomic_write(outdir / "se.json", io.dumps(se_doc))
    if isinstance(params, ModelParams):
        se = None
        if se_doc is not None:
            se = {"phi": se_doc["se"]["phi"]}
        io.atomic_write(outdir / "summary.txt", _summary_table(params, se, registry))
    click.echo(str(outdir / "params.json"))


@main.command()
@click.option("--n-assets", "n_assets", type=int, default=50, show_default=True)
@click.option("--periods", type=int, default=750, show_default=True, help="Number of one-third-day periods.")
@click.option("--phi", type=float, default=0.3, show_default=True)
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Structural params.json to simulate from instead of a random draw.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@_guard
def simulate_cmd(n_assets, periods, phi, params_path, seed, out):
    """Simulate a panel; writes returns.csv, truth.json and true_factors.csv."""
    from .montecarlo import draw_dgp

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    if params_path:
        params = io.params_from_dict(json.loads(Path(params_path).read_text()))
        if not isinstance(params, ModelParams):
            raise ValueError("simulation needs structural parameters")
    else:
        params = draw_dgp(McDesign(N=n_assets, T=periods, phi=phi, n_reps=1), rng)
    panel, fg, fc = simulate(params, PanelLayout(params.n_assets, periods), rng)
    outdir = Path(out)
    registry = io.default_registry(panel)
    io.write_long_csv(panel, registry, outdir / "returns.csv")
    io.atomic_write(outdir / "truth.json", io.dumps(io.params_to_dict(params, registry)))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["period", "date", "continent", "global", "continental"])
    for s in range(periods):
        w.writerow([s + 1, registry.dates[s // 3], CONTINENTS[s % 3], repr(float(fg[s])), repr(float(fc[s]))])
    io.atomic_write(outdir / "true_factors.csv", buf.getvalue())
    click.echo(str(outdir / "returns.csv"))


main.add_command(simulate_cmd, name="simulate")


@main.command()
@click.option("--n-assets", "n_assets", type=int, default=50, show_default=True)
@click.option("--periods", type=int, default=750, show_default=True)
@click.option("--phi", type=float, default=0.3, show_default=True)
@click.option("--reps", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--estimator", "estimators", multiple=True,
              type=click.Choice(["mle-one-day", "qmle-res", "qmle-md"]), default=("mle-one-day",))
@click.option("--max-iter", type=int, default=1000, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@_guard
def mc(n_assets, periods, phi, reps, seed, estimators, max_iter, jobs, out):
    """Monte Carlo study; writes mc_table.csv, mc_table.json, mc_table.txt and manifest.json."""
    design = McDesign(N=n_assets, T=periods, phi=phi, n_reps=reps, seed=seed,
                      estimators=tuple(estimators), max_iter=max_iter)
    report = run_study(design, n_jobs=jobs, progress=lambda i, n: _progress(f"replication {i}/{n}"))
    outdir = Path(out)
    io.atomic_write(outdir / "mc_table.csv", emit_table(report, "csv"))
    table_json = emit_table(report, "json")
    io.validate(json.loads(table_json), "mc_table")
    io.atomic_write(outdir / "mc_table.json", table_json)
    io.atomic_write(outdir / "mc_table.txt", emit_table(report, "text"))
    manifest = dict(report.manifest)
    manifest.pop("elapsed_seconds", None)  # keep reruns byte-identical
    manifest["jobs"] = jobs
    io.atomic_write(outdir / "manifest.json", io.dumps(manifest))
    click.echo(emit_table(report, "text"), nl=False)


@main.command()
@click.argument("params_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@_guard
def decompose(params_path, out):
    """Variance shares of global, continental and idiosyncratic factors per asset."""
    doc = json.loads(Path(params_path).read_text())
    params = io.params_from_dict(doc)
    if not isinstance(params, ModelParams):
        raise ValueError("the decomposition needs structural parameters")
    dec = variance_decomposition(params)
    shares = dec.shares()
    names = doc.get("assets") or {c: [f"{c}{i + 1:03d}" for i in range(params.n_assets)] for c in CONTINENTS}
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["continent", "asset", "var_global", "var_continental", "var_idiosyncratic", "var_total",
                "share_global", "share_continental", "share_idiosyncratic"])
    for i, c in enumerate(CONTINENTS):
        for j in range(params.n_assets):
            w.writerow([c, names[c][j]] + [f"{v:.10g}" for v in (
                dec.var_global[i, j], dec.var_continental[i, j], dec.var_idiosyncratic[i, j], dec.total[i, j],
                shares["global"][i, j], shares["continental"][i, j], shares["idiosyncratic"][i, j])])
    io.atomic_write(Path(out) / "decomposition.csv", buf.getvalue())
    click.echo(str(Path(out) / "decomposition.csv"))


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Two-day or structural params.json; the QMLE is fitted when omitted.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--units", type=click.Choice(["decimal", "percent"]), default=None)
@click.option("--standardize/--no-standardize", default=None)
@click.option("--with-se", is_flag=True, help="Add GLS standard errors (needs a QMLE-type fit).")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@_guard
def factors(input_path, params_path, config_path, units, standardize, with_se, out):
    """GLS factor paths, one row per two-day block; writes factors.csv."""
    from .model import build_two_day

    cfg = _config(config_path, units=units, standardize=standardize, out=out, missing="drop-day")
    panel, _, registry = io.ingest(input_path, cfg)
    if cfg.standardize:
        panel, _, _ = standardize_returns(panel)
    if params_path:
        params = io.params_from_dict(json.loads(Path(params_path).read_text()))
        td = build_two_day(params) if isinstance(params, ModelParams) else params
    else:
        td = fit_qmle(panel, opts=EmOptions(max_iter=cfg.max_iter)).params
    if not isinstance(td, TwoDayParams):
        raise TypeError("unexpected parameter type")
    f = extract_factors_gls(td, panel)
    se = se_gls_factors(build_gamma(td, panel.n_periods // 6), f) if with_se else None
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["block", "first_date"] + [f"f{i + 1}" for i in range(f.shape[1])]
    if se is not None:
        head += [f"se_f{i + 1}" for i in range(f.shape[1])]
    w.writerow(head)
    for b in range(f.shape[0]):
        row = [b + 1, registry.dates[2 * b]] + [f"{v:.10g}" for v in f[b]]
        if se is not None:
            row += [f"{v:.10g}" for v in se[b]]
        w.writerow(row)
    outdir = Path(cfg.out)
    io.atomic_write(outdir / "factors.csv", buf.getvalue())
    click.echo(str(outdir / "factors.csv"))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
