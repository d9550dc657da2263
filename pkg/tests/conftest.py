from __future__ import annotations

import numpy as np
import pytest

from staggered_dfm.model import ModelParams


def reference_dgp(n: int, seed: int, phi: float = 0.3) -> ModelParams:
    """Parameters drawn like the Monte Carlo design, smallest variances first."""
    from staggered_dfm.montecarlo import McDesign, draw_dgp

    return draw_dgp(McDesign(N=n, T=750, phi=phi, n_reps=1), np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance criteria record their verdicts here; printed once at the end
ACCEPTANCE: dict[int, tuple[bool, str, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str, extra: str = "") -> None:
    ACCEPTANCE[number] = (passed, title, detail, extra)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail, _ = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} | {detail}")
    for number in sorted(ACCEPTANCE):
        extra = ACCEPTANCE[number][3]
        if extra:
            terminalreporter.write_line(f"-- criterion {number} details --")
            terminalreporter.write_line(extra.rstrip("\n"))
