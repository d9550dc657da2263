"""
Recovering the factor paths
===========================

With many assets the factors are estimated well period by period. GLS
uses the two-day loadings and idiosyncratic variances.
"""

import numpy as np

from staggered_dfm.em import extract_factors_gls
from staggered_dfm.inference import build_gamma, se_gls_factors
from staggered_dfm.model import PanelLayout, build_two_day, simulate, stack_factors
from staggered_dfm.montecarlo import McDesign, draw_dgp

rng = np.random.default_rng(3)
truth = draw_dgp(McDesign(N=100, T=600, n_reps=1), rng)
panel, fg, fc = simulate(truth, PanelLayout(100, 600), rng)
two_day = build_two_day(truth)

f_true = stack_factors(fg, fc)[1:]
f_hat = extract_factors_gls(two_day, panel)[1:]
print("correlation with the true global factor (latest lag): %.3f" % np.corrcoef(f_hat[:, 0], f_true[:, 0])[0, 1])
print("correlation with the true US factor: %.3f" % np.corrcoef(f_hat[:, 8], f_true[:, 8])[0, 1])

# %%
# Conditional standard errors add the effect of estimating the loadings.
# They are evaluated here at the true parameters.
se = se_gls_factors(build_gamma(two_day, panel.n_periods // 6), f_hat)
print("median SE per factor:", np.round(np.median(se, axis=0), 3))
