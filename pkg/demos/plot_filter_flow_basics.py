"""
Filter flow basics
==================

A filter flow gives every pixel its own small linear filter.  This script
builds a few flows by hand, applies them, checks the fast im2col path against
the dense-matrix reference, and draws the expected-flow field on a color wheel.

Run from the repository root:  python3 demos/plot_filter_flow_basics.py
"""

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from pff import flow as fl
from pff.analysis import colorize_flow
from pff.image import load_image

out = Path("demos/output")
out.mkdir(parents=True, exist_ok=True)

img = load_image("data/eval/camera_0.png")
h, w = img.shape[1:]
k = 7

# identity: the delta filter at offset (0, 0) leaves the image alone
ident = fl.identity_flow(h, w, k)
print("identity max change:", np.abs(fl.apply_flow(ident, img) - img).max())

# a uniform delta at (dx, dy) = (3, -2) is a translation with clamped borders
shifted = fl.apply_flow(fl.shift_flow(h, w, k, 3, -2), img)

# spatially varying: pull from the left in the top half, from below in the bottom half
coeffs = np.zeros((h, w, k * k))
r = k // 2
coeffs[: h // 2, :, r * k + 0] = 1.0  # dx = -3
coeffs[h // 2 :, :, (r + 3) * k + r] = 1.0  # dy = +3
split = fl.FilterFlow(coeffs, "simplex")

# random simplex filters: every output pixel is a convex mix of its 7x7 window
rng = np.random.default_rng(0)
soft = fl.normalize_simplex(rng.normal(0, 1.5, (h, w, k * k)))
mixed = fl.apply_flow(soft, img)

# the dense reference is only feasible on small crops
crop = img[:, :24, :24]
small = fl.normalize_simplex(rng.normal(size=(24, 24, k * k)))
diff = np.abs(fl.apply_flow(small, crop) - fl.apply_flow_bruteforce(small, crop)).max()
print("im2col vs dense operator:", diff)

fig, ax = plt.subplots(2, 3, figsize=(10, 7))
panels = [
    (img[0], "input"),
    (shifted[0], "shift (3, -2)"),
    (fl.apply_flow(split, img)[0], "two-region flow"),
    (mixed[0], "random simplex flow"),
    (np.moveaxis(colorize_flow(fl.expected_flow(split)), 0, -1), "expected flow, two regions"),
    (np.moveaxis(colorize_flow(fl.expected_flow(soft)), 0, -1), "expected flow, random"),
]
for a, (im, title) in zip(ax.ravel(), panels):
    a.imshow(im, cmap="gray", vmin=0, vmax=1)
    a.set_title(title)
    a.axis("off")
fig.tight_layout()
fig.savefig(out / "filter_flow_basics.png", dpi=100)
print("wrote", out / "filter_flow_basics.png")
