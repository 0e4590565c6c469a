"""Low-rank adapter: frozen base matrix plus trainable factors A and B.

The update direction lives entirely in B's column span, B starts at zero so
the adapted layer reproduces the frozen layer exactly at step 0, and the base
matrix never receives gradient.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LoraAdapter:
    """Frozen (m x d) weight with a trainable rank-r update B @ A.

    A is (r x d) Gaussian with variance 1/r, B is (m x r) zeros;
    `alpha_scaling` is a constant multiplier on B @ A.
    """

    def __init__(self, w0: np.ndarray, r: int, rng: np.random.Generator,
                 alpha_scaling: float = 1.0):
        w0 = np.asarray(w0, dtype=np.float64)
        if w0.ndim != 2:
            raise ValueError(f"base weight must be 2-D, got shape {w0.shape}")
        m, d = w0.shape
        if not 1 <= r <= min(m, d):
            raise ValueError(f"rank {r} must satisfy 1 <= r <= min({m}, {d})")
        if alpha_scaling <= 0:
            raise ValueError("alpha_scaling must be positive")
        self.m = m
        self.d = d
        self.r = r
        self.alpha_scaling = float(alpha_scaling)
        self.w0 = Tensor(w0)  # frozen: requires_grad stays False
        self.A = Tensor(rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, d)), requires_grad=True)
        self.B = Tensor(np.zeros((m, r)), requires_grad=True)

    @classmethod
    def create(cls, m: int, d: int, r: int, seed: int,
               w0: np.ndarray | None = None, alpha_scaling: float = 1.0) -> "LoraAdapter":
        """Build an adapter, randomly initializing the frozen base when none
        is supplied (entries ~ N(0, 1/d))."""
        if m < 1 or d < 1:
            raise ValueError(f"dimensions must be >= 1, got ({m}, {d})")
        rng = np.random.default_rng(seed)
        if w0 is None:
            w0 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(m, d))
        return cls(w0, r, rng, alpha_scaling)

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}

    def update_tensor(self) -> Tensor:
        """alpha * B @ A as a graph node."""
        return T.mul(T.matmul(self.B, self.A), self.alpha_scaling)

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        """W0 x + alpha * B A x for column-vector inputs (contracting
        dimension first: x is (d,) or (d, n))."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[0] != self.d:
            raise ValueError(f"input contracting dimension {x.shape[0]} != {self.d}")
        base = T.matmul(self.w0, x)
        update = T.matmul(self.B, T.matmul(self.A, x))
        return T.add(base, T.mul(update, self.alpha_scaling))

    def forward_rows(self, h: Tensor) -> Tensor:
        """Row-activation convention: h (..., d) -> (..., m), same math as
        `forward` applied per row."""
        if h.shape[-1] != self.d:
            raise ValueError(f"input feature dimension {h.shape[-1]} != {self.d}")
        base = T.matmul(h, T.transpose_last(self.w0))
        update = T.matmul(T.matmul(h, T.transpose_last(self.A)), T.transpose_last(self.B))
        return T.add(base, T.mul(update, self.alpha_scaling))

    def merge(self) -> np.ndarray:
        """Dense W0 + alpha * B @ A (fixed-rank baseline only: the gated
        rank-expert layer cannot be folded because its update is task-dependent)."""
        return self.w0.data + self.alpha_scaling * (self.B.data @ self.A.data)
