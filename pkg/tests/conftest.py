import json
import sys
from pathlib import Path

import numpy as np
import pytest

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

FIXTURES = HERE / "fixtures"
REPO = HERE.parent


@pytest.fixture(scope="session")
def fx():
    with np.load(FIXTURES / "fixtures.npz") as data:
        return {k: data[k] for k in data.files}


@pytest.fixture(scope="session")
def frozen():
    return json.loads((FIXTURES / "values.json").read_text())


@pytest.fixture(scope="session")
def corpus(fx):
    return [fx[f"corpus{i}"][None] for i in range(4)]


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def central_diff(f, x, eps=1e-5, n_probe=None, rng=None):
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (in place perturbation).

    With ``n_probe`` only that many randomly chosen entries are probed; the rest stay NaN.
    """
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    idx = range(flat.size)
    if n_probe is not None and n_probe < flat.size:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, n_probe, replace=False)
    g = grad.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, tol=1e-4, atol=1e-7):
    """Relative error against the larger gradient magnitude.

    Gradients that vanish identically (a conv bias feeding batch norm) leave
    only finite-difference noise, so differences below ``atol`` always pass.
    """
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    diff = np.max(np.abs(a - n))
    if diff < atol:
        return
    err = diff / max(np.max(np.abs(n)), np.max(np.abs(a)))
    assert err < tol, f"relative gradient error {err:.3e}"
