"""EDENet: parallel multi-scale echo-direction-encoding blocks and a dense aggregation head.

A window of GPR frames enters as an image stack ``C x D x w``: radar channels
are convolution input channels, depth runs down the rows and the along-track
window runs across the columns.  Each block applies learnable Gabor filters,
direction-aware attention and a conv / max-pool / conv unit; the flattened
block outputs are concatenated and mapped to a unit-norm descriptor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .daa import DirectionAttention
from .errors import ConfigError, UsageError
from .gpr_sim import GprSequence
from .lgf import LGFLayer
from .numerics import Param, Tensor

TRAIN_NORM_EPS = 1e-8


@dataclass(frozen=True)
class EdeBlockConfig:
    K: int
    k: int
    shift_channels: int = 4
    pool_window: int = 2
    pool_stride: int = 2
    shift_kernel: int = 3

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ConfigError(f"EDE block kernel extent must be odd, got {self.K}")
        if self.k < 2:
            raise ConfigError(f"EDE block needs k >= 2 directions, got {self.k}")
        if min(self.shift_channels, self.pool_window, self.pool_stride) < 1:
            raise ConfigError("shift_channels, pool_window and pool_stride must be >= 1")
        if self.shift_kernel < 1 or self.shift_kernel % 2 == 0:
            raise ConfigError("shift_kernel must be odd")

    def output_shape(self, depth: int, window: int) -> tuple[int, int, int]:
        """Shape of the block output for a ``depth x window`` input plane."""
        if depth < self.pool_window or window < self.pool_window:
            raise ConfigError(f"input plane {depth}x{window} smaller than pool window {self.pool_window}")
        h = (depth - self.pool_window) // self.pool_stride + 1
        w = (window - self.pool_window) // self.pool_stride + 1
        return self.shift_channels, h, w


def scale_block(K: int, k: int, shift_channels: int = 4) -> EdeBlockConfig:
    """Block config with the default pooling for kernel extent ``K``."""
    pool = 4 if K >= 35 else 2
    return EdeBlockConfig(K, k, shift_channels, pool, pool)


@dataclass(frozen=True)
class NetConfig:
    scales: tuple[EdeBlockConfig, ...] = field(
        default_factory=lambda: tuple(scale_block(K, 64) for K in (35, 11, 5)))
    descriptor_dim: int = 400
    reduction: int = 16
    window: int = 100
    depth: int = 64
    channels: int = 3

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("NetConfig.scales must not be empty")
        if self.descriptor_dim < 1 or self.reduction < 1:
            raise ConfigError("descriptor_dim and reduction must be >= 1")
        if min(self.window, self.depth, self.channels) < 1:
            raise ConfigError("window, depth and channels must be >= 1")
        for s in self.scales:
            s.output_shape(self.depth, self.window)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        """``(S, D, C)``: frames per window, depth bins, channels."""
        return self.window, self.depth, self.channels

    def flat_size(self) -> int:
        return sum(math.prod(s.output_shape(self.depth, self.window)) for s in self.scales)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["scales"] = tuple(EdeBlockConfig(**s) for s in d["scales"])
        return cls(**d)


def preset(name: str, **overrides) -> NetConfig:
    """Named network configurations: ``default``, ``four_scale`` (adds scale 23), ``tiny``, ``experiment``."""
    if name == "default":
        cfg = NetConfig()
    elif name == "four_scale":
        cfg = NetConfig(scales=tuple(scale_block(K, 64) for K in (35, 23, 11, 5)))
    elif name == "tiny":
        cfg = NetConfig(scales=(EdeBlockConfig(5, 4, 2, 2, 2),), descriptor_dim=8,
                        window=8, depth=16, channels=2)
    elif name == "experiment":
        cfg = NetConfig(scales=tuple(scale_block(K, 16, shift_channels=8) for K in (11, 5)),
                        descriptor_dim=128, window=8)
    else:
        raise UsageError(f"unknown network preset {name!r}")
    if overrides:
        cfg = NetConfig(**{**cfg.__dict__, **overrides})
    return cfg


def _uniform(rng, shape, fan_in):
    return rng.uniform(-1.0, 1.0, shape) / math.sqrt(fan_in)


class EdeBlock:
    def __init__(self, cfg: EdeBlockConfig, in_channels: int, reduction: int,
                 rng: np.random.Generator, name: str):
        self.cfg = cfg
        s, k, q = cfg.shift_channels, cfg.k, cfg.shift_kernel
        self.lgf = LGFLayer(in_channels, cfg.K, k, name=f"{name}.lgf")
        self.daa = DirectionAttention(k, reduction, rng, name=f"{name}.daa")
        self.W1 = Param(_uniform(rng, (s, k, q, q), k * q * q), f"{name}.shift.W1")
        self.b1 = Param(_uniform(rng, (s,), k * q * q), f"{name}.shift.b1")
        self.W2 = Param(_uniform(rng, (s, s, q, q), s * q * q), f"{name}.shift.W2")
        self.b2 = Param(_uniform(rng, (s,), s * q * q), f"{name}.shift.b2")

    def params(self) -> list[Param]:
        return self.lgf.params() + self.daa.params() + [self.W1, self.b1, self.W2, self.b2]

    def shift_unit(self, V: Tensor) -> Tensor:
        return shift_invariant_unit(V, self.W1, self.b1, self.W2, self.b2, self.cfg)

    def __call__(self, X: Tensor) -> Tensor:
        return self.shift_unit(self.daa(self.lgf(X)))


def shift_invariant_unit(V: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor,
                         cfg: EdeBlockConfig) -> Tensor:
    """conv -> max-pool -> conv, both convs size-preserving."""
    pad = (cfg.shift_kernel - 1) // 2
    h = nx.conv2d(V, W1, b1, padding=pad)
    h = nx.maxpool2d(h, cfg.pool_window, cfg.pool_stride)
    return nx.conv2d(h, W2, b2, padding=pad)


def aggregate(etas: list[Tensor], W: Tensor, b: Tensor, eps: float | None = None) -> Tensor:
    """Concatenate flattened block outputs, apply ``relu(W x + b)``, L2-normalize.

    ``etas`` are batched (``N x ...``) or single block outputs; ``eps=None``
    fails on an all-zero pre-normalization vector.
    """
    batched = etas[0].ndim == 4
    flat = [e.reshape(e.shape[0], -1) if batched else e.reshape(-1) for e in etas]
    z = nx.concat(flat, axis=-1)
    if z.shape[-1] != W.shape[1]:
        raise nx.DimensionError(f"aggregation expects {W.shape[1]} features, got {z.shape[-1]}")
    return nx.l2_normalize(nx.relu(nx.linear(z, W, b)), eps=eps)


def normalize_window(x: np.ndarray) -> np.ndarray:
    """Scale each window (leading axis) to unit RMS; all-zero windows stay zero."""
    r = np.sqrt(np.mean(x ** 2, axis=(-3, -2, -1), keepdims=True))
    return x / np.where(r > 0, r, 1.0)


class EDENet:
    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.blocks = [EdeBlock(s, cfg.channels, cfg.reduction, rng, f"block{i}")
                       for i, s in enumerate(cfg.scales)]
        n = cfg.flat_size()
        self.W = Param(_uniform(rng, (cfg.descriptor_dim, n), n), "agg.W")
        self.b = Param(_uniform(rng, (cfg.descriptor_dim,), n), "agg.b")
        self.snap_to_float32()

    def params(self) -> list[Param]:
        out = [p for blk in self.blocks for p in blk.params()]
        return out + [self.W, self.b]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def snap_to_float32(self) -> None:
        """Round every parameter to the nearest float32 so checkpoints reload exactly."""
        for p in self.params():
            p.data = p.data.astype(np.float32).astype(np.float64)

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        named = self.named_params()
        missing = set(named) - set(tensors)
        extra = set(tensors) - set(named)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in named.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, network expects {p.shape}")
            p.data = arr.copy()

    def forward(self, X: Tensor, train: bool = False) -> Tensor:
        """Descriptors for a ``N x C x D x w`` batch (or one ``C x D x w`` window)."""
        expected = (self.cfg.channels, self.cfg.depth, self.cfg.window)
        if X.shape[-3:] != expected:
            raise nx.DimensionError(f"network expects windows of shape C x D x w = {expected}, got {X.shape}")
        etas = [blk(X) for blk in self.blocks]
        return aggregate(etas, self.W, self.b, eps=TRAIN_NORM_EPS if train else None)

    __call__ = forward

    def encode_windows(self, windows: np.ndarray, batch: int = 32) -> np.ndarray:
        """Inference on ``N x C x D x w`` raw windows; returns ``N x d`` descriptors."""
        out = []
        with nx.no_grad():
            for i in range(0, len(windows), batch):
                x = normalize_window(windows[i:i + batch])
                out.append(self.forward(Tensor(x)).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.descriptor_dim))


class Encoded(NamedTuple):
    descriptors: np.ndarray
    poses: np.ndarray
    frame_ids: np.ndarray


def sequence_windows(seq: GprSequence, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 windows as ``M x C x D x window`` and the centre frame of each."""
    if not 1 <= window <= seq.S:
        raise UsageError(f"window must be in [1, {seq.S}], got {window}")
    M = seq.S - window + 1
    view = np.lib.stride_tricks.sliding_window_view(seq.frames, window, axis=0)  # M,D,C,w
    windows = np.ascontiguousarray(view.transpose(0, 2, 1, 3))
    centres = np.arange(M) + window // 2
    return windows, centres


def encode_sequence(seq: GprSequence, window: int, net: EDENet) -> Encoded:
    if window != net.cfg.window:
        raise UsageError(f"network was built for {net.cfg.window}-frame windows, got {window}")
    if (seq.D, seq.C) != (net.cfg.depth, net.cfg.channels):
        raise ConfigError(f"sequence is D={seq.D}, C={seq.C}; network expects "
                          f"D={net.cfg.depth}, C={net.cfg.channels}")
    windows, centres = sequence_windows(seq, window)
    return Encoded(net.encode_windows(windows), seq.poses[centres], centres)


def encode_energy_profile(seq: GprSequence, window: int) -> Encoded:
    """Baseline: mean absolute amplitude per depth bin over the window, L2-normalized."""
    windows, centres = sequence_windows(seq, window)
    profile = np.abs(windows).mean(axis=(1, 3))
    with nx.no_grad():
        desc = nx.l2_normalize(Tensor(profile)).data
    return Encoded(desc, seq.poses[centres], centres)
