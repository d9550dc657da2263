"""The 196 identification restrictions of the unrestricted two-day model.

Each restriction is linear in the entries of ``Lambda`` and ``M``:
``sum(coef * Lambda[row, col]) + sum(coef * M[i, j]) = value``. Loading
terms are written in block coordinates ``(k, a, c)``: day-block ``k``,
factor ``a`` (column of Lambda, 1..14) and asset ``c`` (1..N), all 1-based.

Three groups are emitted, in this order:

* 156 zero loadings on the first four assets of each block,
* 21 equalities tying the same asset's loading across the two days,
* 19 restrictions on the factor covariance ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import N_FACTORS, TwoDayParams

# (label, block k, assets c, zero factors a) for the zero group
ZERO_STEPS: tuple[tuple[str, int, tuple[int, ...], tuple[int, ...]], ...] = (
    ("I.1", 1, (1, 2, 3, 4), (1, 2, 3, 4, 5, 9, 10, 11, 12, 13)),
    ("I.2", 6, (1, 2, 3, 4), (4, 5, 6, 7, 8, 10, 11, 12, 13, 14)),
    ("I.3", 4, (1, 2, 3), (6, 7, 8, 10, 12, 13, 14)),
    ("I.4", 4, (1, 2, 3, 4), (1, 2, 9)),
    ("I.5", 3, (1, 2, 3), (3,)),
    ("I.6", 3, (1, 2), (7, 8, 14)),
    ("I.7", 2, (1, 2), (4, 11)),
    ("I.8", 2, (1, 2), (8, 14)),
    ("I.9", 5, (1, 2), (1, 9)),
    ("I.10", 5, (1, 2), (5,)),
    ("I.11", 5, (1, 2), (11,)),
    ("I.12", 5, (1,), (6, 7, 8, 12, 13, 14)),
    ("I.13", 3, (1,), (1, 2, 9, 10, 11, 13)),
    ("I.14", 2, (1,), (1, 2, 3, 9, 10, 12)),
)

# factors whose loadings on the zeroed assets must form an invertible block
ZERO_STEP_PIVOTS: dict[str, tuple[int, ...]] = {
    "I.1": (6, 7, 8, 14),
    "I.2": (1, 2, 3, 9),
    "I.3": (4, 5, 11),
    "I.4": (3, 4, 5, 11),
    "I.5": (4, 5, 12),
    "I.6": (6, 12),
    "I.7": (5, 13),
    "I.8": (7, 13),
    "I.9": (2, 10),
    "I.10": (4, 10),
    "I.11": (4, 10),
    "I.12": (10,),
    "I.13": (12,),
    "I.14": (13,),
}

# (label, (k1, a1), (k2, a2), assets): Lambda_{k1,a1,c} = Lambda_{k2,a2,c}
EQUALITY_STEPS: tuple[tuple[str, tuple[int, int], tuple[int, int], tuple[int, ...]], ...] = (
    ("II.1", (6, 9), (3, 12), (1, 2)),
    ("II.2", (4, 11), (1, 14), (1, 2)),
    ("II.3", (6, 1), (3, 4), (1, 2)),
    ("II.4", (6, 2), (3, 5), (1, 2, 3)),
    ("II.5", (6, 3), (3, 6), (1, 2, 3, 4)),
    ("II.6", (1, 8), (4, 5), (1, 2)),
    ("II.7", (1, 7), (4, 4), (1, 2, 3)),
    ("II.8", (1, 6), (4, 3), (1, 2, 3)),
)

# factor-covariance zeros, 1-based (i, j) with i < j
M_ZERO_ENTRIES: tuple[tuple[int, int], ...] = (
    (4, 12), (5, 12), (6, 12),
    (2, 10), (3, 10), (4, 10),
    (3, 11), (4, 11), (5, 11),
    (5, 13), (6, 13), (7, 13),
)

N_RESTRICTIONS = N_FACTORS * N_FACTORS


class LayoutTooSmallError(ValueError):
    """Raised when fewer than five assets per continent are available."""


@dataclass(frozen=True)
class Restriction:
    """One linear restriction on ``(Lambda, M)``.

    ``lambda_terms`` holds ``(k, a, c, coef)`` and ``m_terms`` holds
    ``(i, j, coef)``, all indices 1-based.
    """

    label: str
    kind: str  # "zero" | "equal" | "m"
    lambda_terms: tuple[tuple[int, int, int, float], ...]
    m_terms: tuple[tuple[int, int, float], ...]
    value: float = 0.0

    def evaluate(self, two_day: TwoDayParams) -> float:
        """Violation ``lhs - value``."""
        n = two_day.n_assets
        lam, m = two_day.Lambda, two_day.M
        out = -self.value
        for k, a, c, w in self.lambda_terms:
            out += w * lam[(k - 1) * n + c - 1, a - 1]
        for i, j, w in self.m_terms:
            out += w * m[i - 1, j - 1]
        return out


def _zero_group() -> list[Restriction]:
    out = []
    for label, k, assets, factors in ZERO_STEPS:
        for c in assets:
            for a in factors:
                out.append(Restriction(label, "zero", ((k, a, c, 1.0),), ()))
    return out


def _equality_group() -> list[Restriction]:
    out = []
    for label, (k1, a1), (k2, a2), assets in EQUALITY_STEPS:
        for c in assets:
            out.append(Restriction(label, "equal", ((k1, a1, c, 1.0), (k2, a2, c, -1.0)), ()))
    return out


def _m_group() -> list[Restriction]:
    out = [
        Restriction("III.1", "m", (), ((4, 4, 1.0), (6, 6, -1.0))),
        Restriction("III.1", "m", (), ((4, 4, 1.0), (5, 5, -1.0))),
        Restriction("III.2", "m", (), ((4, 4, 1.0), (6, 4, -1.0)), 1.0),
    ]
    for i, j in M_ZERO_ENTRIES:
        out.append(Restriction("III.3", "m", (), ((j, i, 1.0),)))
    for j in (10, 11, 12, 13):
        out.append(Restriction("III.4", "m", (), ((j, j, 1.0),), 1.0))
    return out


@lru_cache(maxsize=None)
def _all() -> tuple[Restriction, ...]:
    out = tuple(_zero_group() + _equality_group() + _m_group())
    assert len(out) == N_RESTRICTIONS
    return out


def restriction_set(n_assets: int) -> list[Restriction]:
    """The 196 restriction descriptors for a panel with ``n_assets`` per continent."""
    if n_assets < 5:
        raise LayoutTooSmallError("at least five assets per continent are required")
    return list(_all())


def violations(two_day: TwoDayParams) -> np.ndarray:
    """Vector of the 196 restriction violations."""
    return RestrictionOperator(two_day.n_assets).residual(two_day.Lambda, two_day.M)


class RestrictionOperator:
    """Vectorized evaluation of all restrictions.

    Only the 24 anchor rows (first four assets of each block) of ``Lambda``
    enter any restriction.
    """

    def __init__(self, n_assets: int):
        self.n_assets = n_assets
        rs = restriction_set(n_assets)
        lr, lrow, lcol, lw, mr, mi, mj, mw = [], [], [], [], [], [], [], []
        for r_id, r in enumerate(rs):
            for k, a, c, w in r.lambda_terms:
                lr.append(r_id)
                lrow.append((k - 1) * n_assets + c - 1)
                lcol.append(a - 1)
                lw.append(w)
            for i, j, w in r.m_terms:
                mr.append(r_id)
                mi.append(i - 1)
                mj.append(j - 1)
                mw.append(w)
        self.lam_rid = np.array(lr)
        self.lam_row = np.array(lrow)
        self.lam_col = np.array(lcol)
        self.lam_w = np.array(lw)
        self.m_rid = np.array(mr)
        self.m_i = np.array(mi)
        self.m_j = np.array(mj)
        self.m_w = np.array(mw)
        self.values = np.array([r.value for r in rs])
        self.anchor_rows = np.array(
            [(k - 1) * n_assets + c for k in range(1, 7) for c in range(4)]
        )

        # dense coefficient matrices on the anchor rows and on vec(M)
        anchor_pos = np.searchsorted(self.anchor_rows, self.lam_row)
        self.lam_coef = np.zeros((N_RESTRICTIONS, 24 * N_FACTORS))
        np.add.at(self.lam_coef, (self.lam_rid, anchor_pos * N_FACTORS + self.lam_col), self.lam_w)
        self.m_coef = np.zeros((N_RESTRICTIONS, N_FACTORS * N_FACTORS))
        np.add.at(self.m_coef, (self.m_rid, self.m_i * N_FACTORS + self.m_j), self.m_w)

    def residual(self, lam: np.ndarray, m: np.ndarray) -> np.ndarray:
        return self.residual_anchor(lam[self.anchor_rows], m)

    def residual_anchor(self, lam_anchor: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Same as :meth:`residual` given only the 24 anchor rows of Lambda."""
        return self.linear_anchor(lam_anchor, m) - self.values

    def linear_anchor(self, lam_anchor: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Left-hand sides of all restrictions (no constant), anchor rows only.

        Extra leading axes of ``lam_anchor`` and ``m`` are treated as a batch.
        """
        batch = lam_anchor.shape[:-2]
        lam_flat = lam_anchor.reshape(batch + (24 * N_FACTORS,))
        m_flat = m.reshape(m.shape[:-2] + (N_FACTORS * N_FACTORS,))
        return lam_flat @ self.lam_coef.T + m_flat @ self.m_coef.T


@lru_cache(maxsize=None)
def anchor_row_bases() -> tuple[np.ndarray, ...]:
    """Null-space bases of the loading restrictions for anchor assets 1..4.

    Entry ``j`` is an ``84 x q`` matrix ``P`` whose columns span the allowed
    values of ``(lambda_{1,j}, ..., lambda_{6,j})`` stacked as 6 x 14.
    """
    rs = _all()
    out = []
    for asset in range(1, 5):
        rows = []
        for r in rs:
            terms = [t for t in r.lambda_terms if t[2] == asset]
            if not terms:
                continue
            g = np.zeros(6 * N_FACTORS)
            for k, a, _, w in terms:
                g[(k - 1) * N_FACTORS + a - 1] = w
            rows.append(g)
        g = np.array(rows)
        # exact basis: zero restrictions drop coordinates, equalities tie pairs
        free = [i for i in range(6 * N_FACTORS) if not any(row[i] != 0 and np.count_nonzero(row) == 1 for row in g)]
        ties = [tuple(np.flatnonzero(row)) for row in g if np.count_nonzero(row) == 2]
        tied_to = {b: a for a, b in ties}
        cols = []
        for i in free:
            if i in tied_to:
                continue
            v = np.zeros(6 * N_FACTORS)
            v[i] = 1.0
            for a, b in ties:
                if a == i:
                    v[b] = 1.0
            cols.append(v)
        p = np.array(cols).T
        assert np.allclose(g @ p, 0.0)
        out.append(p)
    return tuple(out)
