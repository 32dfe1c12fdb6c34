"""Learnable Gabor filter layer.

A bank holds ``n`` directional kernels on the fixed angle grid
``theta_k = k * pi / n`` (k = 1..n).  The wavelength, ellipticity, phase and
Gaussian width are shared by every direction of a bank and are the only
learnable quantities.  Kernels are made zero-mean before use, so a layer
ignores constant image regions.

Pixel offsets are measured from the kernel centre: row offset ``i``, column
offset ``j``, rotated as ``i' = i cos(theta) + j sin(theta)``,
``j' = -i sin(theta) + j cos(theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Param, Tensor

# Added to every softplus-mapped parameter so it stays strictly positive.
POS_FLOOR = 1e-6


def direction_grid(n_dirs: int) -> np.ndarray:
    return np.arange(1, n_dirs + 1) * math.pi / n_dirs


def centered_offsets(K: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.arange(K) - (K - 1) / 2.0
    return np.meshgrid(r, r, indexing="ij")


@dataclass(frozen=True)
class GaborBank:
    K: int
    n_dirs: int
    lam: float
    gamma: float
    phi: float
    sigma: float

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ConfigError(f"kernel extent must be odd and positive, got {self.K}")
        if self.n_dirs < 1:
            raise ConfigError("a bank needs at least one direction")
        for name in ("lam", "gamma", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"Gabor {name} must be > 0, got {getattr(self, name)}")

    @property
    def thetas(self) -> np.ndarray:
        return direction_grid(self.n_dirs)

    @classmethod
    def default(cls, K: int, n_dirs: int) -> "GaborBank":
        return cls(K, n_dirs, lam=K / 2.0, gamma=0.5, phi=0.0, sigma=K / 4.0)


def _gabor_terms(K, thetas, lam, gam, phi, sig):
    """Kernel values and their partial derivatives, shaped ``(n_dirs, n_banks, K, K)``."""
    i, j = centered_offsets(K)
    cos_t = np.cos(thetas)[:, None, None]
    sin_t = np.sin(thetas)[:, None, None]
    ip = (i * cos_t + j * sin_t)[:, None]
    jp = (-i * sin_t + j * cos_t)[:, None]
    lam, gam, phi, sig = (np.asarray(a, dtype=np.float64).reshape(1, -1, 1, 1)
                          for a in (lam, gam, phi, sig))
    quad = ip ** 2 * gam ** 2 + jp ** 2
    env = np.exp(-quad / (2.0 * sig ** 2))
    arg = 2.0 * np.pi * ip / lam + phi
    c, s = np.cos(arg), np.sin(arg)
    lg = -env * c
    d_lam = -env * s * 2.0 * np.pi * ip / lam ** 2
    d_phi = env * s
    d_gam = c * env * ip ** 2 * gam / sig ** 2
    d_sig = -c * env * quad / sig ** 3
    return lg, d_lam, d_gam, d_phi, d_sig


def gabor_kernel(bank: GaborBank, dir_index: int) -> np.ndarray:
    """Raw (not zero-mean) ``K x K`` kernel of direction ``dir_index`` (1-based)."""
    if not 1 <= dir_index <= bank.n_dirs:
        raise ConfigError(f"dir_index must be in [1, {bank.n_dirs}], got {dir_index}")
    theta = bank.thetas[dir_index - 1: dir_index]
    lg = _gabor_terms(bank.K, theta, bank.lam, bank.gamma, bank.phi, bank.sigma)[0]
    return lg[0, 0]


def gabor_stack(lam: Tensor, gam: Tensor, phi: Tensor, sig: Tensor, K: int, n_dirs: int) -> Tensor:
    """Differentiable raw kernels for one bank per input channel: ``n_dirs x C x K x K``."""
    for name, t in (("lambda", lam), ("gamma", gam), ("sigma", sig)):
        if np.any(t.data <= 0):
            raise ConfigError(f"Gabor {name} must be > 0")
    lg, d_lam, d_gam, d_phi, d_sig = _gabor_terms(K, direction_grid(n_dirs), lam.data, gam.data,
                                                  phi.data, sig.data)

    def backward(g):
        return tuple((g * d).sum(axis=(0, 2, 3)).reshape(t.shape)
                     for d, t in ((d_lam, lam), (d_gam, gam), (d_phi, phi), (d_sig, sig)))

    return nx._make(lg, (lam, gam, phi, sig), backward)


def zero_dc(kernel: Tensor) -> Tensor:
    """Subtract the mean over the last two axes."""
    K2 = kernel.shape[-2] * kernel.shape[-1]
    mean = kernel.data.mean(axis=(-2, -1), keepdims=True)

    def backward(g):
        return (g - g.sum(axis=(-2, -1), keepdims=True) / K2,)

    return nx._make(kernel.data - mean, (kernel,), backward)


def inverse_softplus(y: float) -> float:
    y = y - POS_FLOOR
    return float(y + math.log(-math.expm1(-y)))


def positive(raw: Tensor) -> Tensor:
    return nx.softplus(raw) + POS_FLOOR


class LGFLayer:
    """One Gabor bank per input channel; responses of a direction are summed over channels.

    Trainable state is stored unconstrained: ``lam``, ``gamma`` and ``sigma`` pass
    through softplus, ``phi`` is used as is.
    """

    def __init__(self, in_channels: int, K: int, n_dirs: int, name: str = "lgf"):
        init = GaborBank.default(K, n_dirs)
        self.K, self.n_dirs, self.in_channels = K, n_dirs, in_channels
        full = lambda v: np.full(in_channels, v)
        self.lam = Param(full(inverse_softplus(init.lam)), f"{name}.lam")
        self.gamma = Param(full(inverse_softplus(init.gamma)), f"{name}.gamma")
        self.phi = Param(full(init.phi), f"{name}.phi")
        self.sigma = Param(full(inverse_softplus(init.sigma)), f"{name}.sigma")
        # inference cache: (parameter snapshot, kernels, kernel spectra by FFT size)
        self._frozen: tuple[bytes, Tensor, dict] | None = None

    def params(self) -> list[Param]:
        return [self.lam, self.gamma, self.phi, self.sigma]

    def banks(self) -> list[GaborBank]:
        """Current parameter values as plain banks, one per input channel."""
        vals = [positive(self.lam).data, positive(self.gamma).data, self.phi.data,
                positive(self.sigma).data]
        return [GaborBank(self.K, self.n_dirs, *(float(v[c]) for v in vals))
                for c in range(self.in_channels)]

    def kernels(self) -> Tensor:
        raw = gabor_stack(positive(self.lam), positive(self.gamma), self.phi,
                          positive(self.sigma), self.K, self.n_dirs)
        return zero_dc(raw)

    def __call__(self, X: Tensor) -> Tensor:
        pad = (self.K - 1) // 2
        if nx.is_grad_enabled():
            return nx.conv2d(X, self.kernels(), padding=pad)
        # Without gradients the kernels are a pure function of four short parameter
        # vectors, so kernels and their spectra are reused until those change.
        key = b"".join(p.data.tobytes() for p in self.params())
        if self._frozen is None or self._frozen[0] != key:
            self._frozen = (key, self.kernels(), {})
        _, kernels, spectra = self._frozen
        return nx.conv2d(X, kernels, padding=pad, spectra=spectra)


def lgf_forward(X: Tensor, banks: list[GaborBank]) -> Tensor:
    """Directional response stack ``k x H x W`` of fixed banks (one per input channel)."""
    if len(banks) != X.shape[-3]:
        raise nx.DimensionError(f"{len(banks)} banks for {X.shape[-3]} input channels")
    K, n = banks[0].K, banks[0].n_dirs
    if any(b.K != K or b.n_dirs != n for b in banks):
        raise ConfigError("all banks of a layer must share K and the direction count")
    cols = lambda attr: Tensor([getattr(b, attr) for b in banks])
    kernels = zero_dc(gabor_stack(cols("lam"), cols("gamma"), cols("phi"), cols("sigma"), K, n))
    return nx.conv2d(X, kernels, padding=(K - 1) // 2)


def export_pgm(kernels: np.ndarray, path, pad: int = 1) -> None:
    """Tile ``n x K x K`` kernels side by side into an 8-bit binary PGM, min/max scaled.

    Lossy; for eyeballing learned filters only.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    n, K, _ = kernels.shape
    lo, hi = kernels.min(), kernels.max()
    scaled = np.zeros_like(kernels) if hi == lo else (kernels - lo) / (hi - lo)
    grid = np.zeros((K, n * (K + pad) - pad), dtype=np.uint8)
    for k in range(n):
        grid[:, k * (K + pad): k * (K + pad) + K] = np.rint(scaled[k] * 255)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + grid.tobytes())
