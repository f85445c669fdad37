"""Pixel fidelity and condition drift agree on a monotone degradation.

A family of Gaussian-blur autoencoders gets strictly worse as sigma grows. PSNR
falls, canny/gradient drift rises, and the rank correlation between them is -1.

    python demos/blur_family.py
"""

from driftbench.analysis import spearman
from driftbench.core import roundtrip_dataset
from driftbench.metrics import drift_record, mean_metric, psnr, ssim
from driftbench.projectors import make_canny, make_gradient
from driftbench.synthetic import make_blur_family, make_synthetic_images

SIGMAS = [0, 0.5, 1, 2, 4]

images = make_synthetic_images(64, side=64, seed=0)
canny, grad = make_canny(), make_gradient()
rows = []
for ae in make_blur_family(SIGMAS):
    pairs = roundtrip_dataset(ae, images).pairs
    rows.append((ae.name, mean_metric(pairs, psnr), mean_metric(pairs, ssim),
                 drift_record(pairs, canny).mean, drift_record(pairs, grad).mean))

print(f"{'model':<10}{'PSNR':>8}{'SSIM':>8}{'canny':>9}{'grad':>9}")
for name, p, s, c, g in rows:
    print(f"{name:<10}{p:8.2f}{s:8.4f}{c:9.4f}{g:9.4f}")

psnrs = [r[1] for r in rows]
print("\nSpearman(PSNR, canny drift) =", spearman(psnrs, [r[3] for r in rows]))
print("Spearman(PSNR, gradient drift) =", spearman(psnrs, [r[4] for r in rows]))
