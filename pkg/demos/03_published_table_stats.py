"""Friedman test and Nemenyi critical difference on the published F1 table."""
from semres_ddpm import harness

datasets, methods, M = harness.load_table5()["F1"]
print(f"{len(datasets)} datasets x {len(methods)} methods")

# rank the nine oversamplers, leaving the no-oversampling column out
rep = harness.run_stats(datasets, methods[1:], M[:, 1:])
for m, r in sorted(rep["mean_ranks"].items(), key=lambda kv: -kv[1]):
    lo, hi = rep["intervals"][m]
    print(f"{m:10s} {r:5.2f}   [{lo:5.2f}, {hi:5.2f}]")
print(f"chi2 = {rep['chi2']:.2f}, p = {rep['p_value']:.2e}, CD = {rep['critical_difference']:.3f}")
print(rep["conclusion"])
