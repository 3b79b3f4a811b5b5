"""Layout-conditioned Langevin refinement with an adaptive energy weight.

The chain targets ``p(z_t | m) ~ p(z_t) exp(-nu * E(z_t))``. Each inner step
draws ``eps ~ N(0, I)`` and moves

    z <- z + xi * (score(z) - nu * grad E(z)) + sqrt(2 xi) * eps

with ``xi = 2 (r ||eps|| / ||score_cond||)**2`` and, in adaptive mode,
``nu = ||score|| / ||grad E||`` recomputed every step.

Latents are ``(H, W, C)`` arrays. Any extra leading axes hold independent
chains advanced together: ``nu`` is per chain, while ``xi`` uses per-chain norms
averaged over the batch. For a single chain that is the plain formula above.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Protocol

import numpy as np

from .energy import naef_value_and_grad
from .grid import DEFAULT_LAMBDA, LayoutSpec
from .head import ToyAttentionHead

SAMPLE_NDIM = 3


class LayoutSatisfied(Exception):
    """The energy gradient vanished, so the adaptive weight is undefined."""


class StationaryPoint(Exception):
    """The conditional score vanished, so the SNR step size is undefined."""


class ScoreModel(Protocol):
    num_steps: int

    def alpha_bar(self, t: int) -> float: ...

    def score(self, z: np.ndarray, t: int) -> np.ndarray: ...

    def log_prob(self, z: np.ndarray, t: int) -> np.ndarray | float: ...


@dataclass(frozen=True)
class ChainState:
    z: np.ndarray
    t: int
    k: int = 0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim < SAMPLE_NDIM:
            raise ValueError(f"latent must be (..., H, W, C), got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite values")
        object.__setattr__(self, "z", z)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.z.shape[:-SAMPLE_NDIM]


@dataclass(frozen=True)
class LangevinConfig:
    snr: float = 0.06
    steps: int = 4
    nu_mode: Literal["adaptive", "fixed"] = "adaptive"
    nu: float = 1.0
    noise: bool = True
    mh: bool = False

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if self.steps < 1:
            raise ValueError(f"need at least one Langevin step, got {self.steps}")
        if self.nu_mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown nu_mode {self.nu_mode!r}")
        if self.nu_mode == "fixed" and not self.nu >= 0:
            raise ValueError(f"fixed nu must be nonnegative, got {self.nu}")


def sample_norms(x: np.ndarray) -> np.ndarray:
    """L2 norm of each ``(H, W, C)`` sample; shape is the batch shape."""
    x = np.asarray(x)
    return np.sqrt(np.sum(x * x, axis=(-3, -2, -1)))


def _norm(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))


def adaptive_nu(score_grad, energy_grad) -> float:
    """``||score|| / ||grad E||``.

    Raises:
        LayoutSatisfied: if the energy gradient is exactly zero.
    """
    e = _norm(energy_grad)
    if e == 0.0:
        raise LayoutSatisfied("energy gradient is zero")
    return _norm(score_grad) / e


def nash_alpha_2task(g1, g2) -> tuple[float, float]:
    """Positive solution of ``G^T G alpha = 1 / alpha`` for ``G = [g1, g2]``.

    ``alpha_i = 1 / (||g_i|| sqrt(1 + cos theta))``, so ``alpha1 / alpha2 =
    ||g2|| / ||g1||``.

    Raises:
        ValueError: for a zero gradient or (near-)antiparallel gradients, where
            no positive solution exists.
    """
    g1 = np.ravel(np.asarray(g1, dtype=np.float64))
    g2 = np.ravel(np.asarray(g2, dtype=np.float64))
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0 or n2 == 0:
        raise ValueError("gradients must be nonzero")
    one_plus_cos = 1.0 + (g1 @ g2) / (n1 * n2)
    if one_plus_cos <= 1e-12:
        raise ValueError("gradients are antiparallel; no positive Nash solution")
    root = np.sqrt(one_plus_cos)
    return float(1.0 / (n1 * root)), float(1.0 / (n2 * root))


def conditional_score(state: ChainState, model: ScoreModel, energy_grad, nu) -> np.ndarray:
    """``score(z_t) - nu * grad E(z_t)``."""
    return model.score(state.z, state.t) - np.asarray(nu)[..., None, None, None] * energy_grad


def step_size(score_cond, r: float, noise) -> float:
    """``2 (r ||noise|| / ||score_cond||)**2``; norms are batch means.

    Raises:
        StationaryPoint: if the conditional score is zero.
    """
    if not r > 0:
        raise ValueError(f"snr must be positive, got {r}")
    s = float(np.mean(sample_norms(score_cond)))
    if s == 0.0:
        raise StationaryPoint("conditional score is zero")
    e = float(np.mean(sample_norms(noise)))
    return 2.0 * (r * e / s) ** 2


def _energy_terms(z, t, model, layout, head, config, rho, lam):
    """Unconditional score, energy, energy gradient and per-chain nu."""
    score = model.score(z, t)
    batch = z.shape[:-SAMPLE_NDIM]
    if layout is None or (config.nu_mode == "fixed" and config.nu == 0):
        return score, np.zeros(batch), np.zeros_like(z), np.zeros(batch)
    energy, grad = naef_value_and_grad(z, layout, head, rho, lam)
    if config.nu_mode == "fixed":
        nu = np.full(batch, float(config.nu))
    else:
        g = sample_norms(grad)
        # zero energy gradient: layout satisfied, drop the energy term
        nu = np.where(g > 0, sample_norms(score) / np.where(g > 0, g, 1.0), 0.0)
    return score, energy, grad, nu


def log_target(z, t, model, layout, head, rho, lam, nu) -> np.ndarray:
    """Unnormalized ``log p_t(z) - nu * E(z)`` per chain."""
    logp = np.asarray(model.log_prob(z, t), dtype=np.float64)
    if layout is None:
        return logp
    energy, _ = naef_value_and_grad(z, layout, head, rho, lam, with_grad=False)
    return logp - np.asarray(nu) * energy


def mh_correction(
    proposed: ChainState,
    current: ChainState,
    model: ScoreModel,
    layout: LayoutSpec | None,
    head: ToyAttentionHead | None,
    rho: float,
    nu,
    xi: float,
    rng: np.random.Generator,
    lam: float = DEFAULT_LAMBDA,
):
    """Metropolis-Hastings accept/reject of a Langevin proposal.

    The forward and reverse kernels are ``N(z + xi * score_cond(z), 2 xi I)``
    with the same ``nu`` and ``xi``. Returns ``(state, accepted)`` where
    ``accepted`` has the batch shape.
    """
    if proposed.t != current.t or proposed.z.shape != current.z.shape:
        raise ValueError("proposal and current state belong to different chains or timesteps")
    z0, z1 = current.z, proposed.z
    nu = np.broadcast_to(np.asarray(nu, dtype=np.float64), current.batch_shape)

    def drift(z):
        score = model.score(z, current.t)
        if layout is None:
            return z + xi * score
        _, grad = naef_value_and_grad(z, layout, head, rho, lam)
        return z + xi * (score - nu[..., None, None, None] * grad)

    log_fwd = -np.sum((z1 - drift(z0)) ** 2, axis=(-3, -2, -1)) / (4 * xi)
    log_rev = -np.sum((z0 - drift(z1)) ** 2, axis=(-3, -2, -1)) / (4 * xi)
    with np.errstate(invalid="ignore"):
        log_alpha = (
            log_target(z1, current.t, model, layout, head, rho, lam, nu)
            - log_target(z0, current.t, model, layout, head, rho, lam, nu)
            + log_rev
            - log_fwd
        )
    log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
    u = rng.random(current.batch_shape)
    accepted = np.log(u) < log_alpha
    if not np.any(z1 != z0):
        accepted = np.ones(current.batch_shape, dtype=bool)
    z = np.where(accepted[..., None, None, None], z1, z0)
    return ChainState(z, current.t, proposed.k), accepted


def langevin_step(
    state: ChainState,
    model: ScoreModel,
    layout: LayoutSpec | None,
    head: ToyAttentionHead | None,
    config: LangevinConfig,
    rho: float,
    rng: np.random.Generator,
    lam: float = DEFAULT_LAMBDA,
    log: list | None = None,
) -> ChainState:
    """One inner update ``k -> k + 1``; pass ``layout=None`` to drop the energy term.

    Raises:
        StationaryPoint: if the conditional score vanishes.
    """
    if state.k >= config.steps:
        raise ValueError(f"inner index {state.k} already at the configured {config.steps} steps")
    eps = rng.standard_normal(state.z.shape)
    score, energy, grad, nu = _energy_terms(state.z, state.t, model, layout, head, config, rho, lam)
    cond = score - nu[..., None, None, None] * grad
    xi = step_size(cond, config.snr, eps)
    z = state.z + xi * cond
    if config.noise:
        z = z + np.sqrt(2.0 * xi) * eps
    new = ChainState(z, state.t, state.k + 1)
    accepted = None
    if config.mh:
        new, accepted = mh_correction(new, state, model, layout, head, rho, nu, xi, rng, lam)
    if log is not None:
        log.append(
            {
                "t": state.t,
                "k": state.k,
                "score_norm": float(np.mean(sample_norms(score))),
                "energy_grad_norm": float(np.mean(sample_norms(grad))),
                "nu": float(np.mean(nu)),
                "xi": xi,
                "energy": float(np.mean(energy)),
                **({"accept_rate": float(np.mean(accepted))} if accepted is not None else {}),
            }
        )
    return new


def run_inner_chain(
    state: ChainState,
    model: ScoreModel,
    layout: LayoutSpec | None,
    head: ToyAttentionHead | None,
    config: LangevinConfig,
    rho: float,
    rng: np.random.Generator,
    lam: float = DEFAULT_LAMBDA,
    log: list | None = None,
) -> ChainState:
    """Apply ``config.steps`` Langevin updates starting from ``k = 0``.

    Stops early only if the conditional score vanishes. The returned state has
    ``k`` reset to 0, ready to be handed to the next denoising step.
    """
    if state.k != 0:
        raise ValueError(f"inner chain must start at k = 0, got {state.k}")
    for _ in range(config.steps):
        try:
            state = langevin_step(state, model, layout, head, config, rho, rng, lam, log)
        except StationaryPoint:
            break
    return replace(state, k=0)


def backprop_update(
    state: ChainState,
    layout: LayoutSpec,
    head: ToyAttentionHead,
    eta: float,
    iters: int,
    rho: float,
    lam: float = DEFAULT_LAMBDA,
    log: list | None = None,
) -> ChainState:
    """Plain gradient descent ``z <- z - eta * grad E(z)``, ``iters`` times."""
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if iters < 1:
        raise ValueError(f"iters must be positive, got {iters}")
    z = state.z
    for i in range(iters):
        energy, grad = naef_value_and_grad(z, layout, head, rho, lam)
        if log is not None:
            log.append({"t": state.t, "k": i, "energy": float(np.mean(energy)),
                        "energy_grad_norm": float(np.mean(sample_norms(grad)))})
        z = z - eta * grad
    return ChainState(z, state.t, 0)
