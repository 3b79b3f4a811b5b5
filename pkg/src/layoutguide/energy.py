"""Attention energies, the non-local KL regularizer and their latent gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import DEFAULT_LAMBDA, LayoutSpec, layout_fields, rasterize_mask
from .head import ToyAttentionHead


class DegenerateAttentionError(ValueError):
    """Attention has no mass where a normalization needs it."""


@dataclass(frozen=True)
class GuidanceWeights:
    """Regularizer strength schedule and guidance window.

    ``rho`` falls linearly from ``rho_max`` at the first guided step to
    ``rho_min`` at the last one.
    """

    rho_max: float = 5.0
    rho_min: float = 0.0
    lam: float = DEFAULT_LAMBDA
    guidance_steps: int = 10
    total_steps: int = 50

    def __post_init__(self):
        if not self.rho_max >= self.rho_min >= 0:
            raise ValueError(f"need rho_max >= rho_min >= 0, got {self.rho_max}, {self.rho_min}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.guidance_steps < 1:
            raise ValueError("guidance_steps must be at least 1")
        if self.total_steps < self.guidance_steps:
            raise ValueError(f"guidance_steps ({self.guidance_steps}) exceeds total_steps ({self.total_steps})")


@dataclass(frozen=True)
class TokenEnergy:
    token: int
    aef: float
    nap: float
    total: float


@dataclass(frozen=True)
class EnergyBreakdown:
    aef: float
    nap: float
    rho: float
    total: float
    tokens: tuple[TokenEnergy, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "aef": self.aef,
            "nap": self.nap,
            "rho": self.rho,
            "total": self.total,
            "tokens": [vars(t) for t in self.tokens],
        }


def rho_at(step: int, weights: GuidanceWeights) -> float:
    """Regularizer weight at guided step ``step`` (0-based)."""
    g = weights.guidance_steps
    if not 0 <= step < g:
        raise ValueError(f"guided step {step} outside the guidance window [0, {g})")
    if g == 1:
        return float(weights.rho_max)
    return weights.rho_max - (weights.rho_max - weights.rho_min) * step / (g - 1)


def aef_energy(attention, mask) -> float:
    """``(1 - sum(a * m) / sum(a)) ** 2``."""
    a = np.asarray(attention, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape != m.shape:
        raise ValueError(f"attention shape {a.shape} does not match mask shape {m.shape}")
    total = a.sum()
    if not total > 0:
        raise DegenerateAttentionError("attention has zero total mass")
    return float((1.0 - a[m].sum() / total) ** 2)


def nap_divergence(attention, prior, mask) -> float:
    """KL divergence of the mask-restricted attention from the prior ``tau``."""
    a = np.asarray(attention, dtype=np.float64)
    tau = np.asarray(prior, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    a_in = a[m]
    mass = a_in.sum()
    if not mass > 0:
        raise DegenerateAttentionError("attention has zero mass inside the mask")
    tau_in = tau[m]
    if np.any(tau_in <= 0):
        raise ValueError("prior must be strictly positive on the mask")
    p = a_in / mass
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / tau_in[nz])))


def naef_total(attentions: Sequence, layout: LayoutSpec, priors: Sequence, rho: float) -> EnergyBreakdown:
    """Sum of per-token ``aef + rho * nap``; maps are aligned with ``layout`` entries."""
    if len(attentions) != len(layout) or len(priors) != len(layout):
        raise ValueError("need one attention map and one prior per layout entry")
    rows = []
    for entry, a, tau in zip(layout, attentions, priors):
        a = np.asarray(a, dtype=np.float64)
        m = rasterize_mask(entry.box, *a.shape)
        e_aef = aef_energy(a, m)
        e_nap = nap_divergence(a, tau, m)
        rows.append(TokenEnergy(entry.token, e_aef, e_nap, e_aef + rho * e_nap))
    aef = sum(r.aef for r in rows)
    nap = sum(r.nap for r in rows)
    return EnergyBreakdown(aef, nap, float(rho), aef + rho * nap, tuple(rows))


def _latent(latent) -> np.ndarray:
    return np.asarray(getattr(latent, "z", latent), dtype=np.float64)


def naef_value_and_grad(
    z: np.ndarray,
    layout: LayoutSpec,
    head: ToyAttentionHead,
    rho: float,
    lam: float = DEFAULT_LAMBDA,
    with_grad: bool = True,
):
    """Energy and its latent gradient for ``z`` of shape ``(..., H, W, C)``.

    Leading axes are treated as a batch. Returns ``(energy, grad)`` where
    ``energy`` has the batch shape and ``grad`` matches ``z`` (``None`` when
    ``with_grad`` is false).
    """
    z = np.asarray(z, dtype=np.float64)
    height, width = z.shape[-3], z.shape[-2]
    masks, priors = layout_fields(layout, height, width, float(lam))
    idx = head.check_tokens(layout.tokens)
    a_all = head.attention(z)  # (..., N, H, W)
    a = a_all[..., idx, :, :]

    total = a.sum(axis=(-2, -1), keepdims=True)
    inside = np.where(masks, a, 0.0)
    mass_in = inside.sum(axis=(-2, -1), keepdims=True)
    if np.any(mass_in <= 0):
        raise DegenerateAttentionError("attention underflowed to zero inside a box")
    s = mass_in / total
    a_hat = inside / mass_in
    safe_tau = np.where(masks, priors, 1.0)
    safe_hat = np.where(masks & (a_hat > 0), a_hat, 1.0)
    log_ratio = np.where(masks, np.log(safe_hat) - np.log(safe_tau), 0.0)
    kl = np.sum(a_hat * log_ratio, axis=(-2, -1), keepdims=True)

    per_token = (1.0 - s) ** 2 + rho * kl
    energy = per_token.sum(axis=(-3, -2, -1))
    if not with_grad:
        return energy, None

    # dE/da treating a as unnormalized, then the head's softmax Jacobian and
    # its linear projection.
    g = -2.0 * (1.0 - s) * (masks.astype(np.float64) - s) / total
    g = g + rho * np.where(masks, (log_ratio - kl) / mass_in, 0.0)
    g_all = np.zeros_like(a_all)
    g_all[..., idx, :, :] = g
    grad = head.latent_vjp(head.attention_vjp(a_all, g_all))
    return energy, grad


def naef_energy(latent, layout: LayoutSpec, head: ToyAttentionHead, rho: float, lam: float = DEFAULT_LAMBDA):
    energy, _ = naef_value_and_grad(_latent(latent), layout, head, rho, lam, with_grad=False)
    return float(energy) if np.ndim(energy) == 0 else energy


def naef_breakdown(latent, layout: LayoutSpec, head: ToyAttentionHead, rho: float, lam: float = DEFAULT_LAMBDA):
    """``EnergyBreakdown`` of a single latent ``(H, W, C)``."""
    z = _latent(latent)
    a = head.attention(z, layout.tokens)
    _, priors = layout_fields(layout, z.shape[0], z.shape[1], float(lam))
    return naef_total(list(a), layout, list(priors), rho)


def energy_gradient(latent, layout: LayoutSpec, head: ToyAttentionHead, rho: float, lam: float = DEFAULT_LAMBDA):
    """Analytic gradient of the total energy with respect to the latent."""
    _, grad = naef_value_and_grad(_latent(latent), layout, head, rho, lam)
    return grad


def fd_gradient_oracle(latent, objective: Callable[[np.ndarray], float], rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences with step ``rel_step * max(1, |z_i|)`` per coordinate."""
    z = _latent(latent).copy()
    flat = z.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        f_plus = objective(z)
        flat[i] = orig - h
        f_minus = objective(z)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(z.shape)
