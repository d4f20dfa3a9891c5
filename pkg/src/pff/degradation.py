"""Synthetic degradations used to build (corrupted, clean) training pairs.

Three tasks are supported: linear motion blur, JPEG-style block quantization
and bicubic down/up super-resolution input.  Every random draw goes through an
explicitly passed ``numpy.random.Generator`` so that a seed fully determines the
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import correlate

from .image import as_image, resize_bicubic

TASKS = ("motion-blur", "jpeg", "super-resolution")

# ITU T.81 Annex K, Table K.1 (luminance), row-major
ANNEX_K_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

_LEVEL_SHIFT = 128.0 / 255.0


@dataclass
class DegradeSpec:
    """Parameters for one degradation task, serializable as ``key=value`` text.

    For ``motion-blur`` a positive ``gaussian_sigma`` replaces the random linear
    kernel with a fixed Gaussian of extent ``kernel_size``.
    """

    task: str = "motion-blur"
    max_len: int = 15
    kernel_size: int = 15
    orientation_min: float = 0.0
    orientation_max: float = 180.0
    gaussian_sigma: float = 0.0
    qf: int = 10
    sr_factor: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not 1 <= self.max_len <= self.kernel_size:
            raise ValueError(f"max_len must lie in [1, kernel_size], got {self.max_len}")
        if not 0.0 <= self.orientation_min <= self.orientation_max <= 180.0:
            raise ValueError("orientation range must satisfy 0 <= min <= max <= 180")
        if not 1 <= self.qf <= 100:
            raise ValueError(f"qf must lie in [1, 100], got {self.qf}")
        if self.gaussian_sigma < 0:
            raise ValueError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if self.sr_factor < 2:
            raise ValueError(f"sr_factor must be >= 2, got {self.sr_factor}")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "DegradeSpec":
        return cls(**parse_key_values(text, cls))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "DegradeSpec":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str, cls) -> dict:
    """Parse ``key=value`` lines into kwargs for dataclass ``cls``, coercing by field type.

    Blank lines and ``#`` comments are ignored; unknown keys raise ``ValueError``.
    """
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def _coerce(value: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ.startswith("tuple"):
        value = value.strip("()[] ")
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


# ---------------------------------------------------------------------------
# motion blur
# ---------------------------------------------------------------------------


def linear_kernel(length: float, angle_deg: float, size: int) -> np.ndarray:
    """Rasterize a centered line segment into a ``size x size`` kernel summing to one.

    The segment spans ``length - 1`` pixels between its end samples, so
    ``length == 1`` gives a delta.  It is drawn by bilinear splatting of
    ``ceil(4 * length)`` evenly spaced samples.  Angles are counter-clockwise
    from the +x axis with image rows growing downward.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if not 1.0 <= length <= size:
        raise ValueError(f"length must lie in [1, {size}], got {length}")
    c = (size - 1) / 2.0
    m = int(math.ceil(4.0 * length))
    t = np.linspace(-0.5, 0.5, m) if m > 1 else np.zeros(1)
    theta = math.radians(angle_deg)
    span = length - 1.0
    xs = c + t * span * math.cos(theta)
    ys = c - t * span * math.sin(theta)
    kern = np.zeros((size, size))
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            w = wy * wx
            keep = w > 0.0
            np.add.at(kern, (y0[keep] + dy, x0[keep] + dx), w[keep])
    return kern / kern.sum()


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian kernel of odd extent ``size`` normalized to sum to one."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kern = np.outer(g, g)
    return kern / kern.sum()


def random_linear_kernel(
    rng: np.random.Generator,
    max_len: float,
    size: int,
    angle_range: tuple[float, float] = (0.0, 180.0),
) -> np.ndarray:
    """Draw a linear motion-blur kernel with uniform orientation and length in ``[1, max_len]``."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if not 1 <= max_len <= size:
        raise ValueError(f"max_len must lie in [1, {size}], got {max_len}")
    angle = rng.uniform(angle_range[0], angle_range[1])
    length = rng.uniform(1.0, max_len)
    return linear_kernel(length, angle, size)


def convolve(img, kern) -> np.ndarray:
    """Per-channel 2-D correlation with edge-replicated borders; output keeps the input size."""
    img = as_image(img)
    kern = np.asarray(kern, dtype=np.float64)
    if kern.ndim != 2 or kern.shape[0] % 2 == 0 or kern.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd extents, got shape {kern.shape}")
    if kern.shape[0] > img.shape[1] or kern.shape[1] > img.shape[2]:
        raise ValueError(f"kernel {kern.shape} larger than image {img.shape[1:]}")
    return np.stack([correlate(ch, kern, mode="nearest") for ch in img])


# ---------------------------------------------------------------------------
# JPEG quantization
# ---------------------------------------------------------------------------


def quant_table(qf: int) -> np.ndarray:
    """Annex-K luminance table scaled by the IJG quality rule, clamped to [1, 255]."""
    if not 1 <= int(qf) <= 100 or int(qf) != qf:
        raise ValueError(f"quality factor must be an integer in [1, 100], got {qf}")
    qf = int(qf)
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    table = (ANNEX_K_LUMA * scale + 50) // 100
    return np.clip(table, 1, 255)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def jpeg_degrade(img, qf: int) -> np.ndarray:
    """Simulate baseline JPEG quantization at quality ``qf`` on every channel.

    Each channel is level-shifted, split into 8x8 blocks (edge-replicated to a
    multiple of 8), transformed with an orthonormal DCT-II, quantized with the
    scaled luminance table, and reconstructed.  Output is clamped to [0, 1] as a
    decoder would; no chroma subsampling or entropy coding takes place.
    """
    img = as_image(img)
    table = quant_table(qf).astype(np.float64)
    c, h, w = img.shape
    ph = (-h) % 8
    pw = (-w) % 8
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    x = (x - _LEVEL_SHIFT) * 255.0
    hb, wb = x.shape[1] // 8, x.shape[2] // 8
    blocks = x.reshape(c, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = _round_half_away(coef / table) * table
    rec = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, hb * 8, wb * 8)
    rec = rec / 255.0 + _LEVEL_SHIFT
    return np.clip(rec[:, :h, :w], 0.0, 1.0)


# ---------------------------------------------------------------------------
# super-resolution input
# ---------------------------------------------------------------------------


def sr_degrade(img, factor: int) -> np.ndarray:
    """Bicubic anti-aliased downsample by ``factor`` followed by bicubic upsample to the input size."""
    img = as_image(img)
    if int(factor) != factor or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor}")
    _, h, w = img.shape
    lh = max(1, int(math.floor(h / factor + 0.5)))
    lw = max(1, int(math.floor(w / factor + 0.5)))
    low = resize_bicubic(img, output_shape=(lh, lw), antialias=True)
    return resize_bicubic(low, output_shape=(h, w), antialias=True)


def degrade(img, spec: DegradeSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply the degradation described by ``spec``; blur draws a fresh kernel from ``rng``."""
    if spec.task == "motion-blur":
        if spec.gaussian_sigma > 0:
            return convolve(img, gaussian_kernel(spec.kernel_size, spec.gaussian_sigma))
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        kern = random_linear_kernel(
            rng, spec.max_len, spec.kernel_size, (spec.orientation_min, spec.orientation_max)
        )
        return convolve(img, kern)
    if spec.task == "jpeg":
        return jpeg_degrade(img, spec.qf)
    return sr_degrade(img, spec.sr_factor)
