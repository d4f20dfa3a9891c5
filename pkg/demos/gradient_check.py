"""
Checking hand-written gradients
===============================

Every layer has a hand-written backward pass.  This script compares the full
chain (network, softmax, per-pixel filtering, L1 loss) against central finite
differences in double precision on an 8x8 input.

Run from the repository root:  python3 demos/gradient_check.py
"""

import numpy as np

from pff.predictor import NetConfig, build_network
from pff.trainer import Pipeline, l1_loss

cfg = NetConfig(
    k=3, deep_depth=4, deep_width=4, pool_before=(1,), upsample_before=(3,),
    shallow_depth=2, shallow_width=3, fuse_width=4, head_gain=1.0, dtype="float64", seed=0,
)
pipe = Pipeline(build_network(cfg))
rng = np.random.default_rng(0)
x = rng.random((2, 1, 8, 8))
target = rng.random(x.shape)

pred, _ = pipe.forward(x)
grads = {k: g.copy() for k, g in pipe.backward(l1_loss(pred, target)[1]).items()}


def loss():
    return l1_loss(pipe.forward(x)[0], target)[0]


eps = 1e-6
for name, p in pipe.net.parameters().items():
    flat = p.reshape(-1)
    idx = rng.choice(flat.size, min(5, flat.size), replace=False)
    if np.max(np.abs(grads[name])) < 1e-12:
        # a conv bias followed by batch norm is cancelled by the mean subtraction
        print(f"{name:28s} gradient identically zero (batch norm removes the bias)")
        continue
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = loss()
        flat[i] = old - eps
        down = loss()
        flat[i] = old
        num = (up - down) / (2 * eps)
        ana = grads[name].reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
    print(f"{name:28s} worst relative error {worst:.2e}")
