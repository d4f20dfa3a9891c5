"""Self-supervised training, tiled inference, iteration and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import degradation as deg
from .checkpoint import save_checkpoint
from .errors import NumericalError
from .flow import FilterFlow, apply_filters, apply_filters_backward, softmax, softmax_backward
from .image import as_image, psnr, rgb_to_y, ssim
from .optim import TrainState, adam_step
from .predictor import NetConfig, Network, build_network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    degrade: deg.DegradeSpec = field(default_factory=deg.DegradeSpec)
    patch_size: int = 32
    batch_size: int = 8
    steps: int = 2000
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    smooth_weight: float = 0.0
    sparse_weight: float = 0.0
    eval_every: int = 250
    checkpoint_every: int = 0
    tile: int = 64
    seed: int = 0
    corpus: str = ""
    heldout: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        m = self.net.size_multiple
        if self.patch_size < m or self.patch_size % m:
            raise ValueError(f"patch_size {self.patch_size} incompatible with pooling (multiple of {m})")
        if self.tile < m or self.tile % m:
            raise ValueError(f"tile {self.tile} incompatible with pooling (multiple of {m})")

    # -- key=value text -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in ("net", "degrade"):
                continue
            lines.append(f"{f.name}={getattr(self, f.name)}")
        for k, v in self.net.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(i) for i in v)
            lines.append(f"net.{k}={v}")
        for f in fields(self.degrade):
            lines.append(f"degrade.{f.name}={getattr(self.degrade, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        groups: dict[str, list[str]] = {"": [], "net": [], "degrade": []}
        for line in text.splitlines():
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key = stripped.split("=", 1)[0].strip()
            prefix, _, rest = key.partition(".")
            if rest and prefix in ("net", "degrade"):
                groups[prefix].append(stripped[len(prefix) + 1 :])
            else:
                groups[""].append(stripped)
        top = deg.parse_key_values("\n".join(groups[""]), _TopLevel)
        net_kw = deg.parse_key_values("\n".join(groups["net"]), NetConfig)
        if "center_bias" in net_kw:
            net_kw["center_bias"] = None if net_kw["center_bias"] in ("None", "") else float(net_kw["center_bias"])
        deg_kw = deg.parse_key_values("\n".join(groups["degrade"]), deg.DegradeSpec)
        return cls(net=NetConfig(**net_kw), degrade=deg.DegradeSpec(**deg_kw), **top)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


@dataclass
class _TopLevel:
    patch_size: int
    batch_size: int
    steps: int
    lr: float
    beta1: float
    beta2: float
    adam_eps: float
    weight_decay: float
    smooth_weight: float
    sparse_weight: float
    eval_every: int
    checkpoint_every: int
    tile: int
    seed: int
    corpus: str
    heldout: str


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def match_channels(img, channels: int) -> np.ndarray:
    img = as_image(img)
    if img.shape[0] == channels:
        return img
    if channels == 1:
        return rgb_to_y(img)
    return np.repeat(img, 3, axis=0)


def sample_batch(corpus, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random crops with on-the-fly degradation; returns ``(inputs, targets)`` as ``(N, C, P, P)``."""
    if not corpus:
        raise ValueError("empty corpus")
    p = cfg.patch_size
    for img in corpus:
        if img.shape[-2] < p or img.shape[-1] < p:
            raise ValueError(f"corpus image {img.shape} smaller than patch size {p}")
    c = cfg.net.in_channels
    inputs = np.empty((cfg.batch_size, c, p, p))
    targets = np.empty((cfg.batch_size, c, p, p))
    for b in range(cfg.batch_size):
        src = corpus[int(rng.integers(len(corpus)))]
        top = int(rng.integers(src.shape[-2] - p + 1))
        left = int(rng.integers(src.shape[-1] - p + 1))
        clean = match_channels(src[:, top : top + p, left : left + p], c)
        targets[b] = clean
        inputs[b] = deg.degrade(clean, cfg.degrade, rng)
    return inputs, targets


def make_pairs(images, spec: deg.DegradeSpec, channels: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic (degraded, clean) pairs; image ``i`` draws from ``default_rng([seed, i])``."""
    pairs = []
    for i, img in enumerate(images):
        clean = match_channels(img, channels) if channels else as_image(img)
        rng = np.random.default_rng([spec.seed, i])
        pairs.append((deg.degrade(clean, spec, rng), clean))
    return pairs


# ---------------------------------------------------------------------------
# loss and composed pipeline
# ---------------------------------------------------------------------------


def l1_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient ``sign(pred - target) / N``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    n = d.size
    return float(np.abs(d, dtype=np.float64).sum() / n), (np.sign(d) / n).astype(pred.dtype, copy=False)


def flow_regularizer(coeffs, smooth: float, sparse: float) -> tuple[float, np.ndarray]:
    """Optional L2 penalty on first spatial differences and L1 penalty on the filters, both averaged."""
    loss = 0.0
    grad = np.zeros_like(coeffs)
    if smooth:
        dv = np.diff(coeffs, axis=-3)
        dh = np.diff(coeffs, axis=-2)
        n = coeffs.size
        loss += smooth * (float((dv * dv).sum()) + float((dh * dh).sum())) / n
        gv = 2.0 * smooth * dv / n
        gh = 2.0 * smooth * dh / n
        grad[..., 1:, :, :] += gv
        grad[..., :-1, :, :] -= gv
        grad[..., :, 1:, :] += gh
        grad[..., :, :-1, :] -= gh
    if sparse:
        loss += sparse * float(np.abs(coeffs).sum()) / coeffs.size
        grad += sparse * np.sign(coeffs) / coeffs.size
    return loss, grad


class Pipeline:
    """Network -> (softmax) -> filter application, with a matching reverse pass."""

    def __init__(self, net: Network, threads: int = 1):
        self.net = net
        self.threads = threads
        self._cache = None

    @property
    def config(self) -> NetConfig:
        return self.net.config

    def filters(self, logits):
        if self.config.constraint == "simplex":
            return softmax(logits, axis=-1)
        return logits

    def forward(self, x) -> tuple[np.ndarray, np.ndarray | None]:
        """Restore a batch ``x`` of shape ``(N, C, H, W)``; returns ``(pred, coeffs)``."""
        x = np.asarray(x, dtype=self.config.dtype)
        out = self.net.forward(x)
        if self.config.head == "direct-image":
            self._cache = (x, None)
            return out.transpose(0, 3, 1, 2), None
        coeffs = self.filters(out)
        self._cache = (x, coeffs)
        return apply_filters(coeffs, x, threads=self.threads), coeffs

    def backward(self, grad_pred, grad_coeffs=None) -> dict[str, np.ndarray]:
        """Parameter gradients; the input-image gradient is left in ``self.input_grad``."""
        x, coeffs = self._cache
        grad_pred = np.asarray(grad_pred, dtype=self.config.dtype)
        if coeffs is None:
            grads = self.net.backward(grad_pred.transpose(0, 2, 3, 1))
            self.input_grad = self.net.input_grad
            return grads
        d_coeffs, d_img = apply_filters_backward(coeffs, x, grad_pred)
        if grad_coeffs is not None:
            d_coeffs = d_coeffs + grad_coeffs
        if self.config.constraint == "simplex":
            d_logits = softmax_backward(coeffs, d_coeffs, axis=-1)
        else:
            d_logits = d_coeffs
        grads = self.net.backward(d_logits)
        self.input_grad = d_img + self.net.input_grad
        return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: Network
    state: TrainState
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)


def _write_log_row(fh, row):
    if fh is not None:
        fh.write("\t".join(str(v) for v in row) + "\n")
        fh.flush()


def train(
    cfg: TrainConfig,
    corpus,
    heldout=None,
    checkpoint_path=None,
    log_path=None,
    net: Network | None = None,
    state: TrainState | None = None,
    threads: int = 1,
) -> TrainResult:
    """Run ``cfg.steps`` ADAM steps of L1 reconstruction training.

    Batches for step ``t`` are drawn from ``default_rng([cfg.seed, t])`` so a run
    is a pure function of config, corpus and seed.  Every ``eval_every`` steps a
    ``step, loss, psnr, ssim`` row over the held-out pairs is appended to the
    TSV log.  A non-finite loss or gradient raises ``NumericalError``; the last
    checkpoint written before that point is left untouched.
    """
    corpus = [as_image(im) for im in corpus]
    net = net or build_network(cfg.net)
    state = state or TrainState.for_network(net, cfg.seed)
    pipe = Pipeline(net, threads)
    pairs = None
    if heldout:
        pairs = make_pairs(heldout, cfg.degrade, cfg.net.in_channels)
    result = TrainResult(net, state)
    fh = open(log_path, "w") if log_path else None
    try:
        _write_log_row(fh, ("step", "loss", "psnr", "ssim"))
        start = state.step
        for t in range(start, cfg.steps):
            rng = np.random.default_rng([cfg.seed, t])
            inputs, targets = sample_batch(corpus, cfg, rng)
            net.train()
            pred, coeffs = pipe.forward(inputs)
            loss, grad = l1_loss(pred, targets.astype(pred.dtype))
            reg_grad = None
            if coeffs is not None and (cfg.smooth_weight or cfg.sparse_weight):
                reg, reg_grad = flow_regularizer(coeffs, cfg.smooth_weight, cfg.sparse_weight)
                loss += reg
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {t}")
            grads = pipe.backward(grad, reg_grad)
            adam_step(net, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            result.losses.append(loss)
            done = t + 1
            if pairs and cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.steps):
                report = evaluate(net, pairs, tile=cfg.tile, threads=threads)
                window = result.losses[-cfg.eval_every :]
                row = (done, f"{float(np.mean(window)):.6f}", f"{report.mean_psnr:.4f}", f"{report.mean_ssim:.6f}")
                result.evals.append(row)
                _write_log_row(fh, row)
                log.info("step %d loss %s psnr %s ssim %s", *row)
            if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(net, state, checkpoint_path, {"train_config": cfg.to_text()})
        if checkpoint_path:
            save_checkpoint(net, state, checkpoint_path, {"train_config": cfg.to_text()})
    finally:
        if fh is not None:
            fh.close()
    net.eval()
    return result


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def infer_tiled(net: Network, img, tile: int = 64, threads: int = 1) -> tuple[np.ndarray, FilterFlow | None]:
    """Restore ``img`` by predicting on non-overlapping tiles.

    The image is edge-padded to whole tiles; per-tile predictions are stitched
    and cropped back.  In filter-flow mode the stitched flow is applied to the
    whole input, otherwise the stitched head output is the restored image.
    """
    cfg = net.config
    m = cfg.size_multiple
    if tile < m or tile % m:
        raise ValueError(f"tile {tile} incompatible with pooling schedule (multiple of {m})")
    img = match_channels(img, cfg.in_channels)
    c, h, w = img.shape
    th = min(tile, _ceil_to(h, m))
    tw = min(tile, _ceil_to(w, m))
    ph, pw = _ceil_to(h, th), _ceil_to(w, tw)
    padded = np.pad(img, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    net.eval()
    out = np.empty((ph, pw, cfg.head_channels), dtype=cfg.dtype)
    for y in range(0, ph, th):
        for x in range(0, pw, tw):
            out[y : y + th, x : x + tw] = net.forward(padded[:, y : y + th, x : x + tw])
    out = out[:h, :w]
    if cfg.head == "direct-image":
        return out.transpose(2, 0, 1).astype(np.float64), None
    coeffs = softmax(out, axis=-1) if cfg.constraint == "simplex" else out
    flow = FilterFlow(coeffs, cfg.constraint)
    restored = apply_filters(coeffs.astype(np.float64), img, threads=threads)
    return restored, flow


def iterate_pff(net: Network, img, n: int, tile: int = 64, threads: int = 1) -> list[np.ndarray]:
    """Feed each restored image back through the same network; returns all ``n`` outputs."""
    if n < 1:
        raise ValueError("need at least one iteration")
    outputs = []
    cur = img
    for _ in range(n):
        cur, _ = infer_tiled(net, cur, tile, threads)
        outputs.append(cur)
    return outputs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-pair PSNR/SSIM of the degraded input and of the restored output (Y channel, clamped)."""

    rows: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return math.fsum(r["psnr"] for r in self.rows) / len(self.rows)

    @property
    def mean_ssim(self) -> float:
        return math.fsum(r["ssim"] for r in self.rows) / len(self.rows)

    @property
    def mean_psnr_input(self) -> float:
        return math.fsum(r["psnr_input"] for r in self.rows) / len(self.rows)

    @property
    def mean_ssim_input(self) -> float:
        return math.fsum(r["ssim_input"] for r in self.rows) / len(self.rows)

    @property
    def psnr_gain(self) -> float:
        return self.mean_psnr - self.mean_psnr_input

    def to_tsv(self) -> str:
        cols = ("name", "psnr_input", "ssim_input", "psnr", "ssim")
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append(f"{r['name']}\t{r['psnr_input']:.4f}\t{r['ssim_input']:.6f}\t{r['psnr']:.4f}\t{r['ssim']:.6f}")
        lines.append(
            f"mean\t{self.mean_psnr_input:.4f}\t{self.mean_ssim_input:.6f}\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}"
        )
        return "\n".join(lines) + "\n"


def evaluate(net: Network, pairs, tile: int = 64, threads: int = 1, names=None) -> MetricsReport:
    report = MetricsReport()
    for i, (degraded, clean) in enumerate(pairs):
        degraded = as_image(degraded)
        clean = as_image(clean)
        if degraded.shape != clean.shape:
            raise ValueError(f"pair {i}: degraded {degraded.shape} vs clean {clean.shape}")
        restored, _ = infer_tiled(net, degraded, tile, threads)
        restored = np.clip(restored, 0.0, 1.0)
        inp = np.clip(degraded, 0.0, 1.0)
        clean_c = match_channels(clean, restored.shape[0])
        inp = match_channels(inp, restored.shape[0])
        report.rows.append(
            {
                "name": names[i] if names else str(i),
                "psnr_input": psnr(clean_c, inp),
                "ssim_input": ssim(clean_c, inp),
                "psnr": psnr(clean_c, restored),
                "ssim": ssim(clean_c, restored),
            }
        )
    return report
