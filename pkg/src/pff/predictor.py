"""Two-stream convolutional predictor of per-pixel filters.

The deep stream is a stack of 3x3 conv/BN/ReLU blocks with identity skips over
block pairs, max pooling and nearest-neighbor upsampling; the shallow stream
stays at full resolution.  Their outputs are concatenated, passed through two
1x1 blocks and a 1x1 head that emits ``k*k`` filter logits per pixel (or the
image channels directly in ``direct-image`` mode).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .layers import ConvBlock, Conv2d, Layer, MaxPool2d, Residual, Upsample2d

HEAD_MODES = ("filter-flow", "direct-image")
CONSTRAINTS = ("simplex", "free")


@dataclass
class NetConfig:
    k: int = 7
    in_channels: int = 1
    head: str = "filter-flow"
    constraint: str = "simplex"
    deep_depth: int = 10
    deep_width: int = 32
    pool_before: tuple = (1, 3)
    upsample_before: tuple = (7, 9)
    shallow_depth: int = 3
    shallow_width: int = 16
    fuse_width: int = 32
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    head_gain: float = 0.1
    # None picks 1.0 for free-form filters (start at the identity) and 0.0 otherwise
    center_bias: float | None = None
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.pool_before = tuple(int(v) for v in self.pool_before)
        self.upsample_before = tuple(int(v) for v in self.upsample_before)
        self.validate()

    def validate(self):
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"filter extent k must be odd, got {self.k}")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.deep_depth < 1 or self.shallow_depth < 1:
            raise ValueError("both streams need at least one layer")
        if len(self.pool_before) != len(self.upsample_before):
            raise ValueError("pooling and upsampling schedules must have equal length")
        both = set(self.pool_before) | set(self.upsample_before)
        if len(both) != len(self.pool_before) + len(self.upsample_before):
            raise ValueError("a layer cannot both pool and upsample")
        if any(not 1 <= i < self.deep_depth for i in both):
            raise ValueError(f"resampling positions must lie in [1, {self.deep_depth - 1}]")
        level = 0
        for i in range(self.deep_depth):
            level += (i in self.pool_before) - (i in self.upsample_before)
            if level < 0:
                raise ValueError("upsampling above input resolution")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_channels(self) -> int:
        return self.k * self.k if self.head == "filter-flow" else self.in_channels

    @property
    def size_multiple(self) -> int:
        """Spatial sizes must be multiples of this."""
        return 2 ** len(self.pool_before)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_before"] = list(self.pool_before)
        d["upsample_before"] = list(self.upsample_before)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Network:
    """Parameters, batch-norm statistics and cached activations of one predictor."""

    def __init__(self, config: NetConfig):
        config.validate()
        self.config = config
        self.training = True
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        w = config.deep_width
        blk = dict(rng=rng, dtype=dtype, momentum=config.bn_momentum, eps=config.bn_eps)

        self.deep_blocks = [
            ConvBlock(config.in_channels if i == 0 else w, w, 3, **blk) for i in range(config.deep_depth)
        ]
        self.deep_units: list[Layer] = []
        i = 0
        resample = set(config.pool_before) | set(config.upsample_before)
        while i < config.deep_depth:
            if i in config.pool_before:
                self.deep_units.append(MaxPool2d())
            if i in config.upsample_before:
                self.deep_units.append(Upsample2d())
            if i >= 1 and i + 1 < config.deep_depth and (i + 1) not in resample:
                self.deep_units.append(Residual(self.deep_blocks[i], self.deep_blocks[i + 1]))
                i += 2
            else:
                self.deep_units.append(self.deep_blocks[i])
                i += 1

        ws = config.shallow_width
        self.shallow_blocks = [
            ConvBlock(config.in_channels if i == 0 else ws, ws, 3, **blk) for i in range(config.shallow_depth)
        ]
        self.fuse_blocks = [
            ConvBlock(w + ws, config.fuse_width, 1, **blk),
            ConvBlock(config.fuse_width, config.fuse_width, 1, **blk),
        ]
        self.head = Conv2d(config.fuse_width, config.head_channels, 1, rng, dtype, gain=config.head_gain)
        if config.head == "filter-flow":
            center = config.center_bias
            if center is None:
                center = 1.0 if config.constraint == "free" else 0.0
            self.head.params["bias"][(config.k * config.k) // 2] = center

        self._named = self._collect()
        self._cached = False
        self.input_grad = None

    def _collect(self) -> dict[str, Layer]:
        named = {}
        for i, b in enumerate(self.deep_blocks):
            for child, layer in b.children().items():
                named[f"deep.{i}.{child}"] = layer
        for i, b in enumerate(self.shallow_blocks):
            for child, layer in b.children().items():
                named[f"shallow.{i}.{child}"] = layer
        for i, b in enumerate(self.fuse_blocks):
            for child, layer in b.children().items():
                named[f"fuse.{i}.{child}"] = layer
        named["head"] = self.head
        return named

    # -- state --------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self._named.items() for pn, arr in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": arr for ln, layer in self._named.items() for bn, arr in layer.buffers.items()}

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    # -- passes -------------------------------------------------------------

    def check_input_size(self, h: int, w: int) -> None:
        m = self.config.size_multiple
        if h < m or w < m or h % m or w % m:
            raise ValueError(f"input {h}x{w} incompatible with pooling schedule (needs multiples of {m})")

    def forward(self, x) -> np.ndarray:
        """Map images ``(N, C, H, W)`` (or one ``(C, H, W)``) to head outputs ``(N, H, W, K)``."""
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        self.check_input_size(x.shape[2], x.shape[3])
        train = self.training
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.config.dtype)
        d = h
        for unit in self.deep_units:
            d = unit.forward(d, train)
        s = h
        for blk in self.shallow_blocks:
            s = blk.forward(s, train)
        self._split = d.shape[-1]
        f = np.concatenate([d, s], axis=-1)
        for blk in self.fuse_blocks:
            f = blk.forward(f, train)
        out = self.head.forward(f, train)
        self._cached = True
        self._single = single
        return out[0] if single else out

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Reverse pass for the last :meth:`forward`; returns gradients keyed like :meth:`parameters`.

        The gradient with respect to the input images is left in ``self.input_grad``.
        """
        if not self._cached:
            raise RuntimeError("backward called without a cached forward pass")
        g = np.asarray(upstream, dtype=self.config.dtype)
        if self._single:
            g = g[None]
        g = self.head.backward(g)
        for blk in reversed(self.fuse_blocks):
            g = blk.backward(g)
        gd, gs = g[..., : self._split], g[..., self._split :]
        for blk in reversed(self.shallow_blocks):
            gs = blk.backward(gs)
        for unit in reversed(self.deep_units):
            gd = unit.backward(gd)
        gx = (gd + gs).transpose(0, 3, 1, 2)
        self.input_grad = gx[0] if self._single else gx
        return {
            f"{ln}.{pn}": layer.grads[pn] for ln, layer in self._named.items() for pn in layer.params
        }


def build_network(cfg: NetConfig) -> Network:
    return Network(cfg)


def identity_network(cfg: NetConfig | None = None) -> Network:
    """A free-form filter-flow network whose output is exactly the identity filter.

    Head weights are zeroed and the head bias is the center delta, so every
    predicted filter is the identity regardless of the input.
    """
    cfg = cfg or NetConfig()
    cfg = NetConfig.from_dict({**cfg.to_dict(), "head": "filter-flow", "constraint": "free"})
    net = Network(cfg)
    net.head.params["weight"][...] = 0
    net.head.params["bias"][...] = 0
    net.head.params["bias"][(cfg.k * cfg.k) // 2] = 1
    return net.eval()
