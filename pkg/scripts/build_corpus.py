"""Regenerate data/train and data/eval from scikit-image's bundled CC0 / public-domain samples.

Each source is converted to luma, halved with the package's bicubic resizer and
cropped.  Run once; the PNGs are committed.
"""

from pathlib import Path

import numpy as np
import skimage.data as sd

from pff.image import resize_bicubic, rgb_to_y, save_image

ROOT = Path(__file__).resolve().parents[1] / "data"

TRAIN = ["astronaut", "coffee", "chelsea", "stereo_motorcycle", "brick", "coins", "grass", "hubble_deep_field"]
EVAL = ["camera", "rocket", "gravel", "moon"]


def luma(name):
    img = getattr(sd, name)()
    if isinstance(img, tuple):
        img = img[0]
    img = np.asarray(img, dtype=np.float64) / 255.0
    if img.ndim == 3:
        img = rgb_to_y(img[..., :3].transpose(2, 0, 1))
    return resize_bicubic(img, 0.5)


def crops(img, size, count, rng):
    _, h, w = img.shape
    for _ in range(count):
        y = int(rng.integers(h - size + 1))
        x = int(rng.integers(w - size + 1))
        yield img[:, y : y + size, x : x + size]


def main():
    rng = np.random.default_rng(2018)
    for sub, names, size, count in (("train", TRAIN, 128, 2), ("eval", EVAL, 64, 3)):
        out = ROOT / sub
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            for i, patch in enumerate(crops(luma(name), size, count, rng)):
                save_image(patch, out / f"{name}_{i}.png")


if __name__ == "__main__":
    main()
