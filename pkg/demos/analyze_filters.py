"""
What do the predicted filters look like?
========================================

Loads the flow written by ``train_toy_deblur.py`` (or falls back to an untrained
network), clusters the per-pixel filters, measures how much of their variance
a handful of principal components explains, and renders loading-factor maps.

Run from the repository root:  python3 demos/analyze_filters.py
"""

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from pff import analysis as an
from pff.flow import expected_flow, read_flow
from pff.image import load_image
from pff.predictor import NetConfig, build_network
from pff.trainer import infer_tiled

out = Path("demos/output")
out.mkdir(parents=True, exist_ok=True)
src = out / "deblur_flow.pff"
if src.exists():
    flow = read_flow(src)
else:
    print("no trained flow found; using an untrained network")
    _, flow = infer_tiled(build_network(NetConfig(k=5)), load_image("data/eval/camera_0.png"))

bank = an.FilterBank.from_flows([flow], max_filters=5000, seed=0)
km = an.kmeans_filters(bank, 16, seed=0)
print(f"k-means: {km.iterations} iterations, inertia {km.inertia:.4g}")

pca = an.pca_filters(bank, min(10, bank.n))
for i, (e, c) in enumerate(zip(pca.energy, np.cumsum(pca.energy)), 1):
    print(f"pc{i:<2d} energy {e:.4f}  cumulative {c:.4f}")

maps = an.loading_factor_maps(flow, pca, 3)
assign = an.assign_nearest(flow.coeffs.reshape(-1, flow.coeffs.shape[-1]), km.centroids)

fig, ax = plt.subplots(2, 3, figsize=(10, 7))
ax[0, 0].imshow(an.filter_mosaic(km.centroids, flow.k, cols=4)[0], cmap="gray")
ax[0, 0].set_title("k-means centroids")
ax[0, 1].imshow(np.moveaxis(an.colorize_assignments(assign, km.centroids, (flow.height, flow.width)), 0, -1))
ax[0, 1].set_title("centroid map")
ax[0, 2].imshow(np.moveaxis(an.colorize_flow(expected_flow(flow)), 0, -1))
ax[0, 2].set_title("expected flow")
for i, m in enumerate(maps):
    ax[1, i].imshow(m.image[0], cmap="coolwarm")
    ax[1, i].set_title(f"loading {i + 1} [{m.vmin:.2f}, {m.vmax:.2f}]")
for a in ax.ravel():
    a.axis("off")
fig.tight_layout()
fig.savefig(out / "filter_analysis.png", dpi=100)
print("wrote", out / "filter_analysis.png")
