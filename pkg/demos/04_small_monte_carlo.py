"""
A small Monte Carlo table
=========================

The full study (N=50, T=750, 200 replications) takes over an hour on one
core; ``staggered-dfm mc`` runs it. This version uses ten replications
of a smaller panel to show the table layout.
"""

from staggered_dfm.montecarlo import McDesign, emit_table, run_study

design = McDesign(N=10, T=750, n_reps=10, seed=4, estimators=("mle-one-day", "qmle-res"))
report = run_study(design, progress=lambda i, n: print(f"replication {i}/{n}", end="\r"))
print()
print(emit_table(report, "text"))
print("failed replications:", report.failures)
