"""Analytic diffusion testbed for layout guidance.

The latent prior is an isotropic Gaussian mixture, so every noised marginal
under the variance-preserving schedule is again a mixture with closed-form
density and score. Sampling is deterministic DDIM driven by that exact score.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .energy import GuidanceWeights, naef_breakdown, naef_value_and_grad, rho_at
from .grid import DEFAULT_LAMBDA, LayoutError, LayoutSpec, layout_fields
from .head import ToyAttentionHead
from .langevin import ChainState, LangevinConfig, backprop_update, run_inner_chain

Baseline = Literal["none", "backprop", "langevin"]
BASELINES = ("none", "backprop", "langevin")

DEFAULT_ETA = 0.1
DEFAULT_BACKPROP_ITERS = 5


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


@dataclass(frozen=True)
class GaussianMixtureLatentModel:
    """Mixture of isotropic Gaussians over ``(H, W, C)`` latents.

    At step ``t`` component ``k`` becomes ``N(sqrt(ab) mu_k, (ab s_k^2 + 1 - ab) I)``
    with ``ab = alpha_bar(t)`` linear in ``t`` from ``alpha_bar_start`` to
    ``alpha_bar_end``.
    """

    weights: np.ndarray
    means: np.ndarray  # (K, H, W, C)
    variances: np.ndarray  # (K,)
    num_steps: int = 50
    alpha_bar_start: float = 0.9999
    alpha_bar_end: float = 0.01

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if mu.ndim != 4 or w.shape != (mu.shape[0],) or var.shape != w.shape:
            raise ValueError("need weights (K,), means (K, H, W, C) and variances (K,)")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if not 1.0 >= self.alpha_bar_start > self.alpha_bar_end > 0.0:
            raise ValueError("need 1 >= alpha_bar_start > alpha_bar_end > 0")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.means.shape[1:]

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps}]")
        return self.alpha_bar_start + (self.alpha_bar_end - self.alpha_bar_start) * t / self.num_steps

    def _log_components(self, z, t):
        ab = self.alpha_bar(t)
        var = ab * self.variances + (1.0 - ab)
        diff = np.asarray(z, dtype=np.float64)[..., None, :, :, :] - np.sqrt(ab) * self.means
        sq = np.sum(diff * diff, axis=(-3, -2, -1))
        log_c = np.log(self.weights) - 0.5 * sq / var - 0.5 * self.dim * np.log(2 * np.pi * var)
        return log_c, diff, var

    def log_prob(self, z, t: int = 0):
        log_c, _, _ = self._log_components(z, t)
        out = _logsumexp(log_c, axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def score(self, z, t: int) -> np.ndarray:
        log_c, diff, var = self._log_components(z, t)
        resp = np.exp(log_c - _logsumexp(log_c, axis=-1)[..., None])
        coef = (resp / var)[..., None, None, None]
        return -np.sum(coef * diff, axis=-4)

    def sample_prior(self, rng: np.random.Generator, t: int = 0, size: int | None = None) -> np.ndarray:
        ab = self.alpha_bar(t)
        n = 1 if size is None else size
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        std = np.sqrt(ab * self.variances[k] + 1.0 - ab)
        z = np.sqrt(ab) * self.means[k] + std[:, None, None, None] * rng.standard_normal((n,) + self.shape)
        return z[0] if size is None else z

    @classmethod
    def standard_normal(cls, shape, **kwargs) -> "GaussianMixtureLatentModel":
        return cls(np.ones(1), np.zeros((1,) + tuple(shape)), np.ones(1), **kwargs)


def denoise_step(state: ChainState, model) -> ChainState:
    """Deterministic DDIM move from ``t`` to ``t - 1`` using the exact score."""
    t = state.t
    if t < 1:
        raise ValueError("cannot denoise past t = 0")
    ab_t, ab_prev = model.alpha_bar(t), model.alpha_bar(t - 1)
    eps_hat = -np.sqrt(1.0 - ab_t) * model.score(state.z, t)
    z0_hat = (state.z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    z = np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return ChainState(z, t - 1, 0)


@dataclass
class BenchMetrics:
    coverage: list[float]
    spread: list[float]
    argmax_in_box: list[bool]
    loglik: float

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.coverage))

    @property
    def mean_spread(self) -> float:
        return float(np.mean(self.spread))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_coverage"] = self.mean_coverage
        d["mean_spread"] = self.mean_spread
        return d


def attention_metrics(attention: np.ndarray, mask: np.ndarray) -> tuple[float, float, bool]:
    """Coverage, normalized in-box entropy and argmax-in-box for one map."""
    a = np.asarray(attention, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    coverage = float(a[m].sum() / a.sum())
    inside = a[m]
    p = inside / inside.sum()
    if m.sum() == 1:
        spread = 1.0
    else:
        nz = p > 0
        spread = float(-np.sum(p[nz] * np.log(p[nz])) / np.log(m.sum()))
    argmax = np.unravel_index(np.argmax(a), a.shape)
    return coverage, min(max(spread, 0.0), 1.0), bool(m[argmax])


def compute_metrics(z, layout: LayoutSpec, head: ToyAttentionHead, model) -> BenchMetrics:
    z = np.asarray(getattr(z, "z", z), dtype=np.float64)
    masks, _ = layout_fields(layout, z.shape[0], z.shape[1], DEFAULT_LAMBDA)
    maps = head.attention(z, layout.tokens)
    cov, spr, arg = zip(*(attention_metrics(a, m) for a, m in zip(maps, masks)))
    return BenchMetrics(list(cov), list(spr), list(arg), float(model.log_prob(z, 0)))


@dataclass
class SampleTrace:
    guided: list[dict] = field(default_factory=list)
    inner: list[dict] = field(default_factory=list)
    snapshots: list[list] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"guided": self.guided, "inner": self.inner}
        if self.snapshots:
            d["snapshots"] = self.snapshots
        return d


@dataclass
class SampleResult:
    z: np.ndarray
    trace: SampleTrace
    metrics: BenchMetrics


def initial_noise(shape, seed: int) -> np.ndarray:
    """``z_T`` for ``seed``; depends on nothing else."""
    return np.random.default_rng([seed, 0]).standard_normal(tuple(shape))


def guided_sample(
    model: GaussianMixtureLatentModel,
    layout: LayoutSpec,
    head: ToyAttentionHead,
    weights: GuidanceWeights,
    langevin: LangevinConfig,
    baseline: Baseline,
    seed: int,
    eta: float = DEFAULT_ETA,
    backprop_iters: int = DEFAULT_BACKPROP_ITERS,
    trace: Literal["none", "norms", "full"] = "norms",
) -> SampleResult:
    """Run the full ``T``-step sampler, refining the first ``G`` estimates.

    Each step forms the DDIM estimate of ``z_{t-1}`` and, inside the guidance
    window, hands it to the selected refinement before the next step.
    """
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")
    if weights.total_steps != model.num_steps:
        raise ValueError(f"weights.total_steps={weights.total_steps} but model has {model.num_steps} steps")
    rng = np.random.default_rng([seed, 1])
    tr = SampleTrace()
    inner_log = tr.inner if trace != "none" else None
    state = ChainState(initial_noise(model.shape, seed), model.num_steps)
    for i in range(model.num_steps):
        state = denoise_step(state, model)
        if baseline != "none" and i < weights.guidance_steps:
            rho = rho_at(i, weights)
            before = naef_breakdown(state.z, layout, head, rho, weights.lam) if trace != "none" else None
            if baseline == "backprop":
                state = backprop_update(state, layout, head, eta, backprop_iters, rho, weights.lam, inner_log)
            else:
                state = run_inner_chain(state, model, layout, head, langevin, rho, rng, weights.lam, inner_log)
            if trace != "none":
                after = naef_breakdown(state.z, layout, head, rho, weights.lam)
                tr.guided.append({"step": i, "t": state.t, "rho": rho,
                                  "before": before.to_dict(), "after": after.to_dict()})
        if trace == "full":
            tr.snapshots.append(state.z.tolist())
    return SampleResult(state.z, tr, compute_metrics(state.z, layout, head, model))


@dataclass
class OracleDensity:
    """Normalized density on a regular grid over ``bounds`` (one pair per axis)."""

    axes: list[np.ndarray]
    density: np.ndarray

    def bin_masses(self, bins: int) -> np.ndarray:
        """Trapezoid mass of each of ``bins`` equal bins per axis."""
        n = self.axes[0].size - 1
        if n % bins:
            raise ValueError(f"{n} grid intervals are not divisible into {bins} bins")
        per = n // bins
        d = self.density
        if d.ndim == 1:
            h = self.axes[0][1] - self.axes[0][0]
            cells = 0.5 * h * (d[:-1] + d[1:])
            return cells.reshape(bins, per).sum(axis=1)
        hx = self.axes[0][1] - self.axes[0][0]
        hy = self.axes[1][1] - self.axes[1][0]
        cells = 0.25 * hx * hy * (d[:-1, :-1] + d[1:, :-1] + d[:-1, 1:] + d[1:, 1:])
        return cells.reshape(bins, per, bins, per).sum(axis=(1, 3))


def posterior_oracle(
    model: GaussianMixtureLatentModel,
    layout: LayoutSpec | None,
    head: ToyAttentionHead | None,
    nu: float,
    t: int,
    bounds,
    resolution: int = 501,
    rho: float = 0.0,
    lam: float = DEFAULT_LAMBDA,
) -> OracleDensity:
    """Brute-force ``p_t(z) exp(-nu E(z))`` on a grid, trapezoid-normalized.

    Only latents with at most two scalar coordinates are supported.
    """
    if model.dim > 2:
        raise ValueError(f"oracle supports latent dimension <= 2, got {model.dim}")
    if resolution < 100:
        raise ValueError("resolution must be at least 100 points per axis")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(model.dim, 2)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1).reshape((-1,) + model.shape)
    logd = np.asarray(model.log_prob(pts, t))
    if layout is not None and nu != 0:
        energy, _ = naef_value_and_grad(pts, layout, head, rho, lam, with_grad=False)
        logd = logd - nu * energy
    dens = np.exp(logd - logd.max()).reshape(mesh[0].shape)
    z = dens
    for ax in reversed(axes):
        z = np.trapezoid(z, ax, axis=-1)
    return OracleDensity(axes, dens / z)


def histogram_tv(samples: np.ndarray, oracle: OracleDensity, bins: int = 50) -> float:
    """Total-variation distance between binned samples and the oracle's bin masses.

    Samples falling outside the oracle's bounds count as unmatched mass.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    edges = [np.linspace(ax[0], ax[-1], bins + 1) for ax in oracle.axes]
    hist, _ = np.histogramdd(samples, bins=edges)
    hist = hist / len(samples)
    masses = oracle.bin_masses(bins)
    outside = 1.0 - hist.sum()
    return float(0.5 * (np.abs(hist - masses).sum() + outside + max(0.0, 1.0 - masses.sum())))


@dataclass(frozen=True)
class Scenario:
    """Everything needed to instantiate a bench run."""

    height: int = 16
    width: int = 16
    channels: int = 4
    layout: LayoutSpec = field(
        default_factory=lambda: LayoutSpec.from_boxes([[0.05, 0.05, 0.4, 0.4], [0.55, 0.55, 0.4, 0.4]])
    )
    mixture_weights: tuple[float, ...] = (0.5, 0.5)
    mixture_variances: tuple[float, ...] = (1.0, 1.0)
    mixture_means: tuple | None = None  # explicit (K, H, W, C) nested lists
    mean_seed: int = 7
    mean_scale: float = 0.5
    head_seed: int = 11
    temperature: float = 0.5
    normalization: str = "token"
    sink_logit: float = 0.0
    num_steps: int = 50
    alpha_bar_start: float = 0.9999
    alpha_bar_end: float = 0.01

    def model(self) -> GaussianMixtureLatentModel:
        k = len(self.mixture_weights)
        if self.mixture_means is not None:
            means = np.asarray(self.mixture_means, dtype=np.float64)
        else:
            rng = np.random.default_rng(self.mean_seed)
            means = self.mean_scale * rng.standard_normal((k, self.height, self.width, self.channels))
        return GaussianMixtureLatentModel(
            np.asarray(self.mixture_weights), means, np.asarray(self.mixture_variances),
            self.num_steps, self.alpha_bar_start, self.alpha_bar_end,
        )

    def head(self) -> ToyAttentionHead:
        return ToyAttentionHead.from_seed(
            max(self.layout.tokens) + 1, self.channels, self.head_seed, self.temperature,
            normalization=self.normalization, sink_logit=self.sink_logit,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = self.layout.to_dict()
        d["mixture_weights"] = list(self.mixture_weights)
        d["mixture_variances"] = list(self.mixture_variances)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise LayoutError(f"unknown scenario keys: {sorted(unknown)}")
        if "layout" in doc:
            doc["layout"] = LayoutSpec.from_dict(doc["layout"])
        for key in ("mixture_weights", "mixture_variances"):
            if key in doc:
                doc[key] = tuple(float(v) for v in doc[key])
        if doc.get("mixture_means") is not None:
            doc["mixture_means"] = tuple(doc["mixture_means"])
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))
