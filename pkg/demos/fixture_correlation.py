"""Rank correlations on the bundled table of 33 published autoencoders.

PSNR tracks condition drift closely (|rho| near 1), rFID somewhat less, and
generation FID hardly at all.

    python demos/fixture_correlation.py
"""

from driftbench.analysis import correlation_matrix, load_table4_fixture

m = load_table4_fixture()
c = correlation_matrix(m, abs_mode=True)
drift_cols = ["Spatial", "Identity", "CLIP", "DINOv2"]
print(f"{'':<8}" + "".join(f"{d:>10}" for d in drift_cols))
for metric in ("PSNR", "SSIM", "LPIPS", "rFID", "gFID"):
    print(f"{metric:<8}" + "".join(f"{c.get(metric, d):10.3f}" for d in drift_cols))
n_gfid = c.counts[m.metrics.index("gFID"), m.metrics.index("Spatial")]
print(f"\ngFID is only reported for {n_gfid} models; its coefficients use those rows.")
