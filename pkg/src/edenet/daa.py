"""Direction-aware attention over a directional response stack.

The stack is squeezed to one number per direction, gated through a
bottleneck, and the gates rescale the stack with a residual path, so every
direction keeps at least unit gain.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Param, Tensor


def bottleneck_width(n: int, reduction: int) -> int:
    return max(1, n // reduction)


def squeeze(V: Tensor) -> Tensor:
    """Per-direction spatial mean."""
    return nx.global_avg_pool(V)


def excite(d: Tensor, F1: Tensor, F2: Tensor) -> Tensor:
    """Gates ``sigmoid(F2 relu(F1 d))`` in (0, 1)."""
    return nx.sigmoid(nx.linear(nx.relu(nx.linear(d, F1)), F2))


def recalibrate(V: Tensor, T: Tensor) -> Tensor:
    """``T_n * V_n + V_n`` for every direction ``n``."""
    if T.shape != V.shape[:-2]:
        raise nx.DimensionError(f"gates {T.shape} do not match stack {V.shape}")
    return V * T.reshape(T.shape + (1, 1)) + V


class DirectionAttention:
    def __init__(self, n: int, reduction: int = 16, rng: np.random.Generator | None = None,
                 name: str = "daa"):
        rng = rng if rng is not None else np.random.default_rng(0)
        m = bottleneck_width(n, reduction)
        self.F1 = Param(rng.uniform(-1, 1, (m, n)) / np.sqrt(n), f"{name}.F1")
        self.F2 = Param(rng.uniform(-1, 1, (n, m)) / np.sqrt(m), f"{name}.F2")

    def params(self) -> list[Param]:
        return [self.F1, self.F2]

    def __call__(self, V: Tensor) -> Tensor:
        return recalibrate(V, excite(squeeze(V), self.F1, self.F2))
