"""Planar image rasters, color conversion, bicubic resampling and quality metrics.

Images are plain ``numpy`` arrays in channel-major layout ``(C, H, W)`` with
``C`` equal to 1 or 3 and samples nominally in ``[0, 1]``.  Functions accept a
2-D ``(H, W)`` array as shorthand for a single-channel image.
"""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage

from .errors import ImageFormatError, TruncatedDataError

PSNR_CAP_DB = 99.0

# BT.601 full-range luma weights
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def as_image(a, copy: bool = False) -> np.ndarray:
    """Validate ``a`` as an image and return it as a float64 ``(C, H, W)`` array."""
    a = np.array(a, dtype=np.float64) if copy else np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected a (C, H, W) image with C in (1, 3), got shape {a.shape}")
    if a.shape[1] < 1 or a.shape[2] < 1:
        raise ValueError(f"empty image of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite samples")
    return a


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _read_ppm(raw: bytes) -> np.ndarray:
    magic = raw[:2]
    channels = 3 if magic == b"P6" else 1
    fields: list[int] = []
    pos = 2
    n = len(raw)
    while len(fields) < 3:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= n:
                raise TruncatedDataError("PPM header ended early")
            raise ImageFormatError("malformed PPM header")
        fields.append(int(raw[start:pos]))
    # exactly one whitespace byte separates header from payload
    if pos >= n:
        raise TruncatedDataError("PPM header ended early")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM (maxval 255) is supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError("PPM has zero size")
    need = width * height * channels
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise TruncatedDataError(f"PPM payload has {len(payload)} bytes, expected {need}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def _read_png(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L", "LA"):
                im = im.convert("L")
            elif mode in ("RGB", "RGBA", "P"):
                im = im.convert("RGB")
            else:
                raise ImageFormatError(f"unsupported PNG pixel mode {mode!r}")
            pixels = np.asarray(im)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError, EOFError) as exc:
        if "truncated" in str(exc).lower() or isinstance(exc, EOFError):
            raise TruncatedDataError(f"{path}: {exc}") from exc
        raise ImageFormatError(f"{path}: {exc}") from exc
    if pixels.ndim == 2:
        return pixels[None]
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM (P5/P6) into a ``(C, H, W)`` array in [0, 1].

    Raises ``FileNotFoundError`` for a missing file, ``ImageFormatError`` for an
    unsupported format and ``TruncatedDataError`` when the payload is short.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] in (b"P5", b"P6"):
        pixels = _read_ppm(raw)
    elif raw[:8] == _PNG_MAGIC:
        pixels = _read_png(path)
    elif len(raw) < 8 and _PNG_MAGIC.startswith(raw) and raw:
        raise TruncatedDataError(f"{path}: PNG signature cut short")
    else:
        raise ImageFormatError(f"{path}: not a PNG or binary PPM file")
    return pixels.astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round-half-up."""
    img = as_image(img)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img, path) -> None:
    """Write ``img`` as an 8-bit PNG (grayscale or RGB)."""
    q = quantize(img)
    if q.shape[0] == 1:
        pil = PILImage.fromarray(q[0], mode="L")
    else:
        pil = PILImage.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)), mode="RGB")
    pil.save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# color
# ---------------------------------------------------------------------------


def rgb_to_y(img) -> np.ndarray:
    """Luma channel of an RGB image; single-channel input is returned unchanged."""
    img = as_image(img)
    if img.shape[0] == 1:
        return img
    return np.tensordot(Y_WEIGHTS, img, axes=(0, 0))[None]


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax <= 2.0, far, 0.0))


def resample_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``(out_len, in_len)`` weight matrix for 1-D bicubic resampling.

    Output sample ``x`` (1-based) maps to input coordinate
    ``x / scale + 0.5 * (1 - 1 / scale)``; when shrinking with anti-aliasing the
    kernel is stretched by ``1 / scale``.  Out-of-range taps reflect
    symmetrically about the border and each row is normalized to sum to one.
    """
    if antialias and scale < 1.0:
        width = 4.0 / scale

        def kernel(x):
            return scale * cubic(scale * x)
    else:
        width = 4.0
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2.0)
    taps = int(math.ceil(width)) + 2
    ind = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - ind)
    weights /= weights.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(ind.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.broadcast_to(np.arange(out_len)[:, None], src.shape)
    np.add.at(mat, (rows, src), weights)
    return mat


def resize_bicubic(img, scale=None, antialias: bool = True, output_shape=None) -> np.ndarray:
    """Separable bicubic resize (Keys, a = -0.5).

    Either ``scale`` (a positive number or ``Fraction``) or an explicit
    ``output_shape=(H, W)`` must be given.  With ``scale`` the output size is
    ``round(scale * size)``, at least 1.
    """
    img = as_image(img)
    _, h, w = img.shape
    if output_shape is None:
        if scale is None:
            raise ValueError("give either scale or output_shape")
        scale = Fraction(scale) if isinstance(scale, (int, Fraction)) else float(scale)
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        out_h = max(1, int(math.floor(scale * h + Fraction(1, 2))))
        out_w = max(1, int(math.floor(scale * w + Fraction(1, 2))))
        sh = sw = float(scale)
    else:
        out_h, out_w = (int(v) for v in output_shape)
        if out_h < 1 or out_w < 1:
            raise ValueError(f"zero-sized output {output_shape}")
        sh, sw = out_h / h, out_w / w
    if (out_h, out_w) == (h, w) and sh == sw == 1.0:
        return img.copy()
    mh = resample_matrix(h, out_h, sh, antialias)
    mw = resample_matrix(w, out_w, sw, antialias)
    return np.matmul(np.matmul(mh, img), mw.T)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _luma_pair(ref, test):
    ref = as_image(ref)
    test = as_image(test)
    if ref.shape != test.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {test.shape}")
    return rgb_to_y(ref)[0], rgb_to_y(test)[0]


def psnr(ref, test) -> float:
    """PSNR in dB on the Y channel with peak 1.0; identical inputs give ``PSNR_CAP_DB``."""
    a, b = _luma_pair(ref, test)
    d = a - b
    mse = math.fsum((d * d).ravel()) / d.size
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * math.log10(1.0 / math.sqrt(mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    x = sliding_window_view(x, n, axis=0) @ g
    return sliding_window_view(x, n, axis=1) @ g


def ssim_map(ref, test) -> np.ndarray:
    """Per-window SSIM over all fully-contained 11x11 Gaussian windows of the Y channel."""
    a, b = _luma_pair(ref, test)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(ref, test) -> float:
    """Mean SSIM on the Y channel (Gaussian window 11, sigma 1.5, K1 0.01, K2 0.03, L 1)."""
    m = ssim_map(ref, test)
    return math.fsum(m.ravel()) / m.size
