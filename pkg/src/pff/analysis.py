"""Filter-bank analysis: k-means clustering, PCA energy, flow colorization and loading maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .flow import FilterFlow, FlowField, kernel_size


@dataclass
class FilterBank:
    """``n`` filters of length ``k*k`` stacked row-wise."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"filter bank must be a non-empty (n, k*k) array, got {self.vectors.shape}")
        kernel_size(self.vectors.shape[1])
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("filter bank contains non-finite values")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return kernel_size(self.vectors.shape[1])

    @classmethod
    def from_flows(cls, flows, max_filters: int | None = None, seed: int = 0) -> "FilterBank":
        """Gather every filter of ``flows``; above ``max_filters`` keep a seeded reservoir sample."""
        flows = list(flows)
        kk = {f.coeffs.shape[-1] for f in flows}
        if len(kk) != 1:
            raise ValueError(f"flows have mixed filter sizes {sorted(kk)}")
        rows = [f.coeffs.reshape(-1, f.coeffs.shape[-1]) for f in flows]
        if max_filters is None or sum(len(r) for r in rows) <= max_filters:
            return cls(np.concatenate(rows, axis=0))
        rng = np.random.default_rng(seed)
        reservoir = np.empty((max_filters, rows[0].shape[1]))
        seen = 0
        for block in rows:
            for vec in block:
                if seen < max_filters:
                    reservoir[seen] = vec
                else:
                    j = int(rng.integers(seen + 1))
                    if j < max_filters:
                        reservoir[j] = vec
                seen += 1
        return cls(reservoir)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign_nearest(vectors, centroids) -> np.ndarray:
    """Index of the nearest centroid for each row; ties go to the lowest index."""
    return np.argmin(_sq_dists(np.asarray(vectors, dtype=np.float64), centroids), axis=1)


def _inertia(x, c, assign):
    d = x - c[assign]
    return float((d * d).sum())


def _kmeanspp(x, n_clusters, rng):
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    closest = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[centers].copy()


def kmeans_filters(bank: FilterBank, n_clusters: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing.

    Empty clusters are reseeded at the point farthest from its centroid; ties in
    the nearest-centroid search go to the lowest index.  ``history`` records
    the inertia after every assignment step.
    """
    x = bank.vectors
    n = x.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} filters")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, n_clusters, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new_assign = assign_nearest(x, centroids)
        history.append(_inertia(x, centroids, new_assign))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            dist = ((x - centroids[assign]) ** 2).sum(1)
            for j in empty:
                far = int(np.argmax(dist))
                centroids[j] = x[far]
                assign[far] = j
                dist[far] = -1.0
    return KMeansResult(centroids, assign, _inertia(x, centroids, assign), history, it)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaResult:
    mean: np.ndarray
    components: np.ndarray  # (d, k*k), orthonormal rows
    variances: np.ndarray  # eigenvalues of the population covariance
    energy: np.ndarray  # variances / total variance
    degenerate: bool = False

    @property
    def k(self) -> int:
        return kernel_size(self.mean.size)

    def project(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, coords) -> np.ndarray:
        return coords @ self.components + self.mean


def pca_filters(bank: FilterBank, d: int) -> PcaResult:
    """Principal components of the mean-centered filter bank, largest variance first.

    ``energy[i]`` is the fraction of total variance along component ``i``.  A
    bank without variance (including a single filter) is flagged ``degenerate``
    and reports zero energy.
    """
    x = bank.vectors
    n, dim = x.shape
    if not 1 <= d <= dim:
        raise ValueError(f"component count {d} outside [1, {dim}]")
    if d > n and n > 1:
        raise ValueError(f"component count {d} exceeds bank size {n}")
    mean = x.mean(axis=0)
    if n == 1:
        return PcaResult(mean, np.eye(dim)[:d], np.zeros(d), np.zeros(d), degenerate=True)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order].T
    # fix the sign so the largest-magnitude entry of each component is positive
    pivot = np.argmax(np.abs(evecs), axis=1)
    evecs *= np.sign(evecs[np.arange(dim), pivot])[:, None]
    total = evals.sum()
    if total <= 0:
        return PcaResult(mean, evecs[:d], np.zeros(d), np.zeros(d), degenerate=True)
    return PcaResult(mean, evecs[:d], evals[:d], evals[:d] / total)


# ---------------------------------------------------------------------------
# colorization
# ---------------------------------------------------------------------------


def color_wheel(vx, vy, radius: float) -> np.ndarray:
    """Hue from direction, saturation from magnitude / ``radius`` (clamped), full value; RGB (3, H, W)."""
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    hue = np.mod(np.arctan2(vy, vx) / (2.0 * np.pi), 1.0)
    sat = np.clip(np.hypot(vx, vy) / radius, 0.0, 1.0) if radius > 0 else np.zeros_like(vx)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return np.moveaxis(hsv_to_rgb(hsv), -1, 0)


def colorize_flow(field: FlowField, radius: float | None = None) -> np.ndarray:
    return color_wheel(field.vx, field.vy, field.radius if radius is None else radius)


def embed_centroids(centroids) -> np.ndarray:
    """2-D PCA coordinates of the centroids, scaled into the unit disk."""
    c = np.asarray(centroids, dtype=np.float64)
    if c.shape[0] < 2:
        return np.zeros((c.shape[0], 2))
    cc = c - c.mean(axis=0)
    _, _, vt = np.linalg.svd(cc, full_matrices=False)
    basis = np.zeros((2, c.shape[1]))
    basis[: min(2, vt.shape[0])] = vt[:2]
    coords = cc @ basis.T
    scale = np.max(np.hypot(coords[:, 0], coords[:, 1]))
    return coords / scale if scale > 0 else coords


def colorize_assignments(assignments, centroids, shape=None, embedding=None) -> np.ndarray:
    """Color each pixel by its centroid's position in a 2-D embedding on the flow color wheel."""
    assignments = np.asarray(assignments)
    if shape is not None:
        assignments = assignments.reshape(shape)
    emb = embed_centroids(centroids) if embedding is None else np.asarray(embedding)
    xy = emb[assignments]
    return color_wheel(xy[..., 0], xy[..., 1], 1.0)


# ---------------------------------------------------------------------------
# loading-factor maps
# ---------------------------------------------------------------------------


@dataclass
class LoadingMap:
    raw: np.ndarray  # (H, W) projection coefficients
    image: np.ndarray  # (1, H, W) min-max normalized to [0, 1]
    vmin: float
    vmax: float


def loading_factor_maps(flow: FilterFlow, pca: PcaResult, top: int) -> list[LoadingMap]:
    """Per-pixel projection of ``filter - mean`` on each of the first ``top`` components."""
    if flow.coeffs.shape[-1] != pca.mean.size:
        raise ValueError(f"flow filters have {flow.coeffs.shape[-1]} taps but the PCA has {pca.mean.size}")
    top = min(top, pca.components.shape[0])
    coords = pca.project(flow.coeffs.reshape(-1, flow.coeffs.shape[-1]))
    maps = []
    for i in range(top):
        raw = coords[:, i].reshape(flow.height, flow.width)
        lo, hi = float(raw.min()), float(raw.max())
        img = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
        maps.append(LoadingMap(raw, img[None], lo, hi))
    return maps


def filter_mosaic(filters, k: int, cols: int = 10, pad: int = 1) -> np.ndarray:
    """Tile ``k x k`` filters into one grayscale image, each min-max normalized."""
    filters = np.asarray(filters, dtype=np.float64).reshape(-1, k, k)
    n = filters.shape[0]
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    out = np.ones((rows * (k + pad) + pad, cols * (k + pad) + pad))
    for i, f in enumerate(filters):
        lo, hi = f.min(), f.max()
        f = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
        r, c = divmod(i, cols)
        y, x = pad + r * (k + pad), pad + c * (k + pad)
        out[y : y + k, x : x + k] = f
    return out[None]


def analysis_report(pca: PcaResult | None = None, km: KMeansResult | None = None, maps=None) -> str:
    lines = []
    if pca is not None:
        lines.append(f"pca components={pca.components.shape[0]} degenerate={pca.degenerate}")
        cum = np.cumsum(pca.energy)
        for i, (e, c) in enumerate(zip(pca.energy, cum)):
            lines.append(f"pc{i + 1}\tenergy={e:.6f}\tcumulative={c:.6f}")
    if km is not None:
        sizes = np.bincount(km.assignments, minlength=km.centroids.shape[0])
        lines.append(f"kmeans clusters={km.centroids.shape[0]} iterations={km.iterations} inertia={km.inertia:.6g}")
        lines.append("cluster_sizes\t" + " ".join(str(int(s)) for s in sizes))
    for i, m in enumerate(maps or []):
        lines.append(f"loading{i + 1}\tmin={m.vmin:.6g}\tmax={m.vmax:.6g}")
    return "\n".join(lines) + "\n"
