"""
Synthetic degradations
======================

Training pairs are made on the fly from clean images.  Here we look at the
three corruptions side by side and at how JPEG quality trades against PSNR.

Run from the repository root:  python3 demos/plot_degradations.py
"""

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from pff import degradation as deg
from pff.image import load_image, psnr, ssim

out = Path("demos/output")
out.mkdir(parents=True, exist_ok=True)
clean = load_image("data/eval/rocket_0.png")
rng = np.random.default_rng(4)

kernel = deg.random_linear_kernel(rng, max_len=11, size=15)
blurred = deg.convolve(clean, kernel)
jpeg = deg.jpeg_degrade(clean, qf=10)
sr = deg.sr_degrade(clean, factor=4)

for name, bad in [("motion blur", blurred), ("jpeg qf10", jpeg), ("bicubic x4", sr)]:
    print(f"{name:12s} psnr {psnr(clean, bad):6.2f} dB  ssim {ssim(clean, bad):.3f}")

# quality sweep over the whole held-out set
images = [load_image(p) for p in sorted(Path("data/eval").glob("*.png"))]
qualities = [5, 10, 20, 30, 40, 60, 80, 95]
curve = [np.mean([psnr(im, deg.jpeg_degrade(im, q)) for im in images]) for q in qualities]

fig = plt.figure(figsize=(11, 6))
for i, (im, title) in enumerate([(clean, "clean"), (blurred, "motion blur"), (jpeg, "JPEG qf 10"), (sr, "bicubic x4")]):
    a = fig.add_subplot(2, 4, i + 1)
    a.imshow(im[0], cmap="gray", vmin=0, vmax=1)
    a.set_title(title)
    a.axis("off")
a = fig.add_subplot(2, 4, 5)
a.imshow(kernel, cmap="magma")
a.set_title("blur kernel")
a.axis("off")
a = fig.add_subplot(2, 2, 4)
a.plot(qualities, curve, "o-")
a.set_xlabel("quality factor")
a.set_ylabel("mean PSNR (dB)")
fig.tight_layout()
fig.savefig(out / "degradations.png", dpi=100)
print("wrote", out / "degradations.png")
