"""Gibbs instability of the projective line at negative temperature.

At beta = -1 the partition function of the anticanonical level k diverges:
the ratio test on collision shells sees the (2k+1)-point stratum blow up,
and the log canonical threshold bracket sits at 2k/(2k+1) < 1.
"""
from p1gibbs.partition import FanoGeometry, gibbs_stability_scan, strong_gibbs_check

rep = gibbs_stability_scan(FanoGeometry(), k_max=4)
for k, v in rep.verdicts.items():
    d = rep.details[k]
    print(f"k={k} N={d['N']}: Z {d['z_verdict']:9s} lct in [{d['lct'][0]:.4f}, {d['lct'][1]:.4f}] -> {v}")
print("gamma bounds", rep.gamma_bounds)

# interpolate between beta = 0 and beta = -1
s = strong_gibbs_check(b_grid=(0.2, 0.4, 0.6, 0.8, 0.95), k_range=(1, 2), mc_samples=5000)
for row in s["rows"]:
    print(f"b={row['b']:.2f}: {row['verdict']}")
print("threshold from divergence test", s["z_threshold"], "from lct", s["lct_threshold"])
