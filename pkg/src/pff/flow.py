"""Per-pixel spatially-variant linear filters ("filter flows").

A :class:`FilterFlow` holds one ``k x k`` filter per output pixel, stored as an
``(H, W, k*k)`` array whose last axis enumerates offsets ``(dy, dx)`` row-major
from ``(-r, -r)`` to ``(r, r)`` with ``r = (k - 1) // 2``.  Applying it computes

    out[c, i, j] = sum_{dy, dx} coeffs[i, j, (dy + r) * k + (dx + r)] * img[c, i + dy, j + dx]

with edge-replicated borders.  The same filter is used for every color channel.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FlowFormatError, NumericalError, TruncatedDataError
from .image import as_image

CONSTRAINTS = ("free", "simplex")
SIMPLEX_TOL = 1e-5
BRUTEFORCE_MAX_PIXELS = 64 * 64
BLOCK_ROWS = 16

_MAGIC = b"PFF1"
_HEADER = struct.Struct("<4sIIII")


def kernel_size(n_coeffs: int) -> int:
    k = int(round(np.sqrt(n_coeffs)))
    if k * k != n_coeffs or k % 2 == 0:
        raise ValueError(f"{n_coeffs} coefficients do not form an odd square filter")
    return k


def offsets(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dy, dx)`` for each of the ``k*k`` filter taps in storage order."""
    r = (k - 1) // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return dy.ravel(), dx.ravel()


@dataclass
class FilterFlow:
    coeffs: np.ndarray
    constraint: str = "free"

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs)
        if self.coeffs.ndim != 3:
            raise ValueError(f"coeffs must be (H, W, k*k), got shape {self.coeffs.shape}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")
        kernel_size(self.coeffs.shape[2])
        if not np.all(np.isfinite(self.coeffs)):
            raise NumericalError("filter coefficients contain non-finite values")
        if self.constraint == "simplex":
            check_simplex(self.coeffs)

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    @property
    def k(self) -> int:
        return kernel_size(self.coeffs.shape[2])

    @property
    def radius(self) -> int:
        return (self.k - 1) // 2

    def filter_at(self, i: int, j: int) -> np.ndarray:
        k = self.k
        return self.coeffs[i, j].reshape(k, k)


@dataclass
class FlowField:
    """Per-pixel displacement ``(vx, vy)`` in pixels; ``vx`` runs along columns."""

    vx: np.ndarray
    vy: np.ndarray
    radius: int
    from_abs_weights: bool = False

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)


def check_simplex(coeffs, tol: float = SIMPLEX_TOL) -> None:
    if np.any(coeffs < 0):
        raise ValueError("simplex filter has negative weights")
    sums = coeffs.sum(axis=-1, dtype=np.float64)
    worst = np.max(np.abs(sums - 1.0)) if sums.size else 0.0
    if worst > tol:
        raise ValueError(f"simplex filter sums deviate from 1 by {worst:.3g}")


def identity_flow(h: int, w: int, k: int, dtype=np.float64) -> FilterFlow:
    """Flow whose every filter is the delta at offset (0, 0)."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"filter extent must be odd, got {k}")
    coeffs = np.zeros((h, w, k * k), dtype=dtype)
    coeffs[:, :, (k * k) // 2] = 1.0
    return FilterFlow(coeffs, "simplex")


def shift_flow(h: int, w: int, k: int, dx: int, dy: int, dtype=np.float64) -> FilterFlow:
    """Flow of uniform deltas at offset ``(dx, dy)``."""
    r = (k - 1) // 2
    if abs(dx) > r or abs(dy) > r:
        raise ValueError(f"offset ({dx}, {dy}) outside filter radius {r}")
    coeffs = np.zeros((h, w, k * k), dtype=dtype)
    coeffs[:, :, (dy + r) * k + (dx + r)] = 1.0
    return FilterFlow(coeffs, "simplex")


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, grad, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of :func:`softmax` given its output ``probs``."""
    return probs * (grad - np.sum(grad * probs, axis=axis, keepdims=True))


def normalize_simplex(raw) -> FilterFlow:
    """Softmax over the filter axis of an ``(H, W, k*k)`` logit array."""
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise NumericalError("filter logits contain non-finite values")
    return FilterFlow(softmax(raw, axis=-1), "simplex")


# ---------------------------------------------------------------------------
# im2col application
# ---------------------------------------------------------------------------


def pad_replicate(img, r: int) -> np.ndarray:
    """Edge-replicate the last two axes of ``img`` by ``r`` pixels."""
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    return np.pad(img, pad, mode="edge")


def im2col(img, k: int, rows: slice | None = None) -> np.ndarray:
    """Neighborhood vectors of ``img[..., C, H, W]`` as ``[..., C, H, W, k*k]``.

    With ``rows`` only that range of output rows is materialized.
    """
    r = (k - 1) // 2
    padded = pad_replicate(img, r)
    view = sliding_window_view(padded, (k, k), axis=(-2, -1))
    if rows is not None:
        view = view[..., rows, :, :, :]
    return view.reshape(view.shape[:-2] + (k * k,))


def _row_blocks(h: int, block_rows: int):
    return [slice(s, min(s + block_rows, h)) for s in range(0, h, block_rows)]


def _run_blocks(fn, blocks, threads: int):
    if threads <= 1 or len(blocks) == 1:
        for b in blocks:
            fn(b)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fn, blocks))


def apply_filters(coeffs, img, threads: int = 1, block_rows: int = BLOCK_ROWS) -> np.ndarray:
    """Apply per-pixel filters ``coeffs[..., H, W, K]`` to ``img[..., C, H, W]``.

    Leading batch axes must agree.  Work is split into fixed row blocks, so the
    result does not depend on ``threads``.
    """
    coeffs = np.asarray(coeffs)
    img = np.asarray(img)
    h, w, kk = coeffs.shape[-3:]
    if img.shape[-2:] != (h, w) or img.shape[:-3] != coeffs.shape[:-3]:
        raise ValueError(f"flow {coeffs.shape} does not match image {img.shape}")
    k = kernel_size(kk)
    r = (k - 1) // 2
    padded = pad_replicate(img, r)
    view = sliding_window_view(padded, (k, k), axis=(-2, -1))
    out = np.empty(img.shape, dtype=np.result_type(coeffs, img))

    def run(rows):
        patches = view[..., rows, :, :, :]
        patches = patches.reshape(patches.shape[:-2] + (kk,))
        out[..., rows, :] = np.einsum("...chwk,...hwk->...chw", patches, coeffs[..., rows, :, :])

    _run_blocks(run, _row_blocks(h, block_rows), threads)
    return out


def apply_filters_backward(coeffs, img, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`apply_filters` w.r.t. ``coeffs`` and ``img``.

    The coefficient gradient at a pixel is the channel-summed neighborhood patch
    weighted by ``grad_out``; the image gradient scatters filter weights back to
    the source pixels and folds the replicated border onto the edge samples.
    """
    coeffs = np.asarray(coeffs)
    h, w, kk = coeffs.shape[-3:]
    k = kernel_size(kk)
    r = (k - 1) // 2
    patches = im2col(img, k)
    d_coeffs = np.einsum("...chwk,...chw->...hwk", patches, grad_out)

    d_pad = np.zeros(grad_out.shape[:-2] + (h + 2 * r, w + 2 * r), dtype=d_coeffs.dtype)
    for t in range(kk):
        a, b = divmod(t, k)
        d_pad[..., a : a + h, b : b + w] += grad_out * coeffs[..., None, :, :, t]
    d_img = d_pad[..., r : r + h, :].copy()
    if r:
        d_img[..., 0, :] += d_pad[..., :r, :].sum(axis=-2)
        d_img[..., -1, :] += d_pad[..., h + r :, :].sum(axis=-2)
        out = d_img[..., r : r + w].copy()
        out[..., 0] += d_img[..., :r].sum(axis=-1)
        out[..., -1] += d_img[..., w + r :].sum(axis=-1)
        d_img = out
    return d_coeffs, d_img


def apply_flow(flow: FilterFlow, img, threads: int = 1) -> np.ndarray:
    """Filter ``img`` (C, H, W) with ``flow`` using the im2col path."""
    img = as_image(img)
    if img.shape[1:] != (flow.height, flow.width):
        raise ValueError(f"flow is {flow.height}x{flow.width} but image is {img.shape[1]}x{img.shape[2]}")
    return apply_filters(flow.coeffs, img, threads=threads)


def flow_matrix(flow: FilterFlow) -> np.ndarray:
    """Materialize the flow as a dense ``(H*W, H*W)`` linear operator on row-major pixels."""
    h, w = flow.height, flow.width
    if h * w > BRUTEFORCE_MAX_PIXELS:
        raise ValueError(f"{h}x{w} exceeds the dense-operator size guard of {BRUTEFORCE_MAX_PIXELS} pixels")
    k = flow.k
    dys, dxs = offsets(k)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = (ii * w + jj).ravel()
    mat = np.zeros((h * w, h * w))
    for t in range(k * k):
        src_i = np.clip(ii + dys[t], 0, h - 1)
        src_j = np.clip(jj + dxs[t], 0, w - 1)
        cols = (src_i * w + src_j).ravel()
        np.add.at(mat, (rows, cols), flow.coeffs[:, :, t].ravel().astype(np.float64))
    return mat


def apply_flow_bruteforce(flow: FilterFlow, img) -> np.ndarray:
    """Reference implementation: multiply the vectorized image by the dense operator."""
    img = as_image(img)
    if img.shape[1:] != (flow.height, flow.width):
        raise ValueError(f"flow is {flow.height}x{flow.width} but image is {img.shape[1]}x{img.shape[2]}")
    mat = flow_matrix(flow)
    c, h, w = img.shape
    return (mat @ img.reshape(c, h * w).T).T.reshape(c, h, w)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def expected_flow(flow: FilterFlow) -> FlowField:
    """First moment of each filter over its offsets.

    Free-form filters are first converted to distributions by normalizing their
    absolute weights; the result is flagged with ``from_abs_weights``.
    """
    coeffs = flow.coeffs.astype(np.float64)
    from_abs = flow.constraint != "simplex"
    if from_abs:
        mag = np.abs(coeffs)
        total = mag.sum(axis=-1, keepdims=True)
        coeffs = np.divide(mag, total, out=np.zeros_like(mag), where=total > 0)
    dys, dxs = offsets(flow.k)
    vx = coeffs @ dxs.astype(np.float64)
    vy = coeffs @ dys.astype(np.float64)
    return FlowField(vx, vy, flow.radius, from_abs)


# ---------------------------------------------------------------------------
# PFF1 file format
# ---------------------------------------------------------------------------


def write_flow(flow: FilterFlow, path) -> None:
    """Write ``flow`` as magic ``PFF1``, four little-endian u32 (H, W, k, constraint), float32 payload."""
    code = CONSTRAINTS.index(flow.constraint)
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, flow.height, flow.width, flow.k, code))
        fh.write(np.ascontiguousarray(flow.coeffs, dtype="<f4").tobytes())


def read_flow(path) -> FilterFlow:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != _MAGIC[: len(raw[:4])]:
            raise FlowFormatError(f"{path}: bad magic")
        raise TruncatedDataError(f"{path}: header is {len(raw)} bytes, expected {_HEADER.size}")
    magic, h, w, k, code = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if k % 2 == 0 or code >= len(CONSTRAINTS):
        raise FlowFormatError(f"{path}: invalid header (k={k}, constraint code={code})")
    need = _HEADER.size + 4 * h * w * k * k
    if len(raw) != need:
        raise TruncatedDataError(f"{path}: {len(raw)} bytes, expected {need}")
    coeffs = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, k * k)
    coeffs = coeffs.astype(np.float32)
    try:
        return FilterFlow(coeffs, CONSTRAINTS[code])
    except (ValueError, NumericalError) as exc:
        raise FlowFormatError(f"{path}: {exc}") from exc
