from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staggered_dfm.io import validate
from staggered_dfm.montecarlo import (
    McDesign,
    StudyAbortedError,
    draw_dgp,
    emit_table,
    read_table_csv,
    rep_generators,
    row_names,
    run_study,
    summarize,
)


@pytest.fixture(scope="module")
def small_report():
    design = McDesign(N=5, T=120, n_reps=2, seed=3, estimators=("mle-one-day", "qmle-md"), max_iter=60)
    return run_study(design)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(0, 2**32 - 1))
def test_dgp_ranges_and_ordering(n, seed):
    p = draw_dgp(McDesign(N=n, T=750, n_reps=1), seed)
    assert p.loadings.min() >= -0.2 and p.loadings.max() <= 1.0
    assert p.idio_var.min() >= 0.2 and p.idio_var.max() <= 2.0
    for c in range(3):
        first, rest = p.idio_var[c, :4], p.idio_var[c, 4:]
        assert first.max() <= rest.min()


def test_dgp_deterministic_per_replication():
    design = McDesign(N=8, T=750, n_reps=3, seed=11)
    a = draw_dgp(design, rep_generators(design, 2)[0])
    b = draw_dgp(design, rep_generators(design, 2)[0])
    c = draw_dgp(design, rep_generators(design, 1)[0])
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert not np.array_equal(a.to_vector(), c.to_vector())


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_reps=0), dict(T=751), dict(phi=1.0), dict(estimators=("ols",)), dict(estimators=())],
)
def test_design_validation(kwargs):
    with pytest.raises(ValueError):
        McDesign(**kwargs)


def test_summarize_against_direct_computation(rng):
    n, reps = 5, 40
    truth = rng.normal(size=(reps, 15 * n + 1))
    est = truth + 0.1 * rng.normal(size=truth.shape)
    se = np.full(truth.shape, 0.1)
    est[3] = np.nan  # a failed replication
    out = summarize(truth, est, se, n)
    ok = np.arange(reps) != 3
    err = est[ok] - truth[ok]
    # zA_0 averages per-entry RMSE over the first column of continent A
    cols = [4 * i for i in range(n)]
    assert np.isclose(out["rmse"][0], np.mean(np.sqrt(np.mean(err[:, cols] ** 2, axis=0))))
    assert np.isclose(out["cove"][-1], np.mean(np.abs(err[:, -1]) <= 1.96 * 0.1))
    assert np.allclose(out["ave_se"], 0.1)
    assert len(out["rmse"]) == len(row_names()) == 14


def test_report_structure(small_report):
    rep = small_report
    assert rep.rows == row_names()
    for est in rep.design.estimators:
        m = rep.metrics[est]
        assert np.all((m["cove"] >= 0) & (m["cove"] <= 1))
        assert np.all(m["rmse"] >= 0) and np.all(m["ave_se"] >= 0)
    assert "standard_errors" in rep.manifest and "seeding" in rep.manifest


def test_text_table_row_order(small_report):
    lines = emit_table(small_report, "text").splitlines()
    names = [ln.split()[0] for ln in lines[3:]]
    assert names == ["zA_0", "zA_1", "zA_2", "zA_3", "zE_0", "zE_1", "zE_2", "zE_3",
                     "zU_0", "zU_1", "zU_2", "zU_3", "Sigma_c", "phi"]


def test_csv_round_trip(small_report):
    table = read_table_csv(emit_table(small_report, "csv"))
    for i, name in enumerate(small_report.rows):
        for est in small_report.design.estimators:
            for m in ("rmse", "ave_se", "cove"):
                assert np.isclose(table[name][f"{est}:{m}"], small_report.metrics[est][m][i], atol=5e-7)


def test_json_validates(small_report):
    validate(json.loads(emit_table(small_report, "json")), "mc_table")


def test_unknown_format(small_report):
    with pytest.raises(ValueError):
        emit_table(small_report, "xml")


def test_rerun_is_bit_identical(small_report):
    again = run_study(small_report.design)
    assert emit_table(again, "csv") == emit_table(small_report, "csv")
    for est in small_report.design.estimators:
        assert np.array_equal(again.estimates[est], small_report.estimates[est])


def test_failures_beyond_threshold_abort(monkeypatch):
    import staggered_dfm.montecarlo as mc

    def boom(estimator, panel, opts):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(mc, "_fit_one", boom)
    with pytest.raises(StudyAbortedError):
        run_study(McDesign(N=5, T=60, n_reps=2, seed=0))
