"""Dynamic factor model for daily returns observed at staggered closing times."""

from .model import (
    CONTINENTS,
    DecompositionReport,
    ModelParams,
    PanelLayout,
    ReturnPanel,
    StateSpaceSystem,
    TwoDayParams,
    build_state_space,
    build_two_day,
    implied_covariance,
    simulate,
    standardize_returns,
    variance_decomposition,
)

__version__ = "0.1.0"
