"""
Training a small deblurring model
=================================

Trains the default two-stream predictor with simplex (softmax) filters to
undo a fixed 3x3 Gaussian blur, then scores it on the held-out crops, runs it a
second time on its own output, and saves the checkpoint plus one predicted
flow for ``analyze_filters.py``.

A few hundred steps take about a minute on one core; the numbers improve
steadily up to a couple of thousand.

Run from the repository root:  python3 demos/train_toy_deblur.py [--steps N]
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from pff.degradation import DegradeSpec
from pff.flow import write_flow
from pff.image import load_image, psnr, save_image
from pff.predictor import NetConfig
from pff.trainer import TrainConfig, evaluate, infer_tiled, iterate_pff, make_pairs, train

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=400)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

out = Path("demos/output")
out.mkdir(parents=True, exist_ok=True)
corpus = [load_image(p) for p in sorted(Path("data/train").glob("*.png"))]
heldout = [load_image(p) for p in sorted(Path("data/eval").glob("*.png"))]

cfg = TrainConfig(
    net=NetConfig(k=5, constraint="simplex", seed=1),
    degrade=DegradeSpec(task="motion-blur", kernel_size=3, max_len=3, gaussian_sigma=1.0, seed=1),
    steps=args.steps,
    eval_every=100,
    seed=1,
)
result = train(cfg, corpus, heldout, checkpoint_path=out / "deblur.ckpt", log_path=out / "deblur.log.tsv")

losses = np.array(result.losses)
print(f"loss: first 50 median {np.median(losses[:50]):.4f}, last 50 median {np.median(losses[-50:]):.4f}")

pairs = make_pairs(heldout, cfg.degrade, 1)
report = evaluate(result.net, pairs)
print(report.to_tsv())
print(f"mean gain {report.psnr_gain:+.3f} dB")

# feed the output back in once more; this is not expected to help
blurred, clean = pairs[0]
once, twice = iterate_pff(result.net, blurred, 2)
print(f"one pass {psnr(clean, np.clip(once, 0, 1)):.3f} dB, two passes {psnr(clean, np.clip(twice, 0, 1)):.3f} dB")

restored, flow = infer_tiled(result.net, blurred)
save_image(blurred, out / "deblur_input.png")
save_image(restored, out / "deblur_output.png")
write_flow(flow, out / "deblur_flow.pff")
print("wrote", out / "deblur.ckpt", "and", out / "deblur_flow.pff")
