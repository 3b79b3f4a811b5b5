"""Fixed linear cross-attention surrogate.

Token ``i`` scores cell ``u`` with the logit ``<z_u, w_i> / temperature``. Two
normalizations are available:

``"spatial"``
    each token's map is a softmax over all cells of the grid.
``"token"``
    each cell distributes attention over the tokens plus a constant sink logit,
    as in text-to-image cross-attention where a start token soaks up the rest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np


@dataclass(frozen=True)
class ToyAttentionHead:
    projections: np.ndarray  # (num_tokens, channels), unit rows
    temperature: float = 1.0
    normalization: Literal["spatial", "token"] = "spatial"
    sink_logit: float = 0.0

    def __post_init__(self):
        w = np.array(self.projections, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"projections must be (tokens, channels), got {w.shape}")
        norms = np.linalg.norm(w, axis=1)
        if np.any(norms == 0):
            raise ValueError("projection vectors must be nonzero")
        w /= norms[:, None]
        w.setflags(write=False)
        object.__setattr__(self, "projections", w)
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.normalization not in ("spatial", "token"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def from_seed(cls, num_tokens: int, channels: int, seed: int, temperature: float = 1.0, **kwargs):
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((num_tokens, channels)), temperature, **kwargs)

    @property
    def num_tokens(self) -> int:
        return self.projections.shape[0]

    @property
    def channels(self) -> int:
        return self.projections.shape[1]

    def check_tokens(self, tokens) -> list[int]:
        tokens = list(tokens)
        if max(tokens) >= self.num_tokens:
            raise ValueError(f"token id {max(tokens)} out of range for a {self.num_tokens}-token head")
        return tokens

    def logits(self, z: np.ndarray) -> np.ndarray:
        """Logits of shape ``(..., N, H, W)`` for latent ``z`` of shape ``(..., H, W, C)``."""
        return np.einsum("...hwc,nc->...nhw", z, self.projections) / self.temperature

    def attention(self, z: np.ndarray, tokens=None) -> np.ndarray:
        """Attention maps ``(..., K, H, W)`` for ``tokens`` (all tokens by default)."""
        a = self._normalize(self.logits(z))
        if tokens is None:
            return a
        return a[..., self.check_tokens(tokens), :, :]

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        if self.normalization == "spatial":
            flat = x.reshape(x.shape[:-2] + (-1,))
            e = np.exp(flat - flat.max(axis=-1, keepdims=True))
            e /= e.sum(axis=-1, keepdims=True)
            return e.reshape(x.shape)
        top = np.maximum(x.max(axis=-3, keepdims=True), self.sink_logit)
        e = np.exp(x - top)
        return e / (e.sum(axis=-3, keepdims=True) + np.exp(self.sink_logit - top))

    def attention_vjp(self, a: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Pull ``dE/da`` (shape of ``a``, all tokens) back to ``dE/dlogits``.

        Both normalizations have the softmax Jacobian ``diag(a) - a a^T``, taken
        over cells for ``"spatial"`` and over tokens for ``"token"``.
        """
        axes = (-2, -1) if self.normalization == "spatial" else (-3,)
        return a * (g - np.sum(a * g, axis=axes, keepdims=True))

    def latent_vjp(self, d_logits: np.ndarray) -> np.ndarray:
        """Pull ``dE/dlogits`` ``(..., N, H, W)`` back to the latent ``(..., H, W, C)``."""
        return np.einsum("...nhw,nc->...hwc", d_logits, self.projections) / self.temperature
