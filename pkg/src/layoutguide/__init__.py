"""Training-free layout guidance on a toy latent diffusion bench."""

__version__ = "0.1.0"

from .bench import GaussianMixtureLatentModel, Scenario, guided_sample, posterior_oracle
from .dynamics import verify_theorem1
from .energy import GuidanceWeights, aef_energy, energy_gradient, nap_divergence, naef_energy
from .grid import BoundingBox, LayoutError, LayoutSpec, TokenAttention, nonlocal_prior, rasterize_mask
from .head import ToyAttentionHead
from .langevin import ChainState, LangevinConfig, langevin_step, nash_alpha_2task, run_inner_chain

__all__ = [
    "BoundingBox",
    "ChainState",
    "GaussianMixtureLatentModel",
    "GuidanceWeights",
    "LangevinConfig",
    "LayoutError",
    "LayoutSpec",
    "Scenario",
    "TokenAttention",
    "ToyAttentionHead",
    "aef_energy",
    "energy_gradient",
    "guided_sample",
    "langevin_step",
    "nap_divergence",
    "naef_energy",
    "nash_alpha_2task",
    "nonlocal_prior",
    "posterior_oracle",
    "rasterize_mask",
    "run_inner_chain",
    "verify_theorem1",
]
