"""Numerical self-checks shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .bench import DEFAULT_ETA, GaussianMixtureLatentModel, Scenario, guided_sample, histogram_tv, posterior_oracle
from .energy import GuidanceWeights, energy_gradient, fd_gradient_oracle, naef_energy
from .grid import LayoutSpec
from .head import ToyAttentionHead
from .langevin import ChainState, LangevinConfig, langevin_step, nash_alpha_2task


def nash_residual_summary(pairs: int = 1000, seed: int = 0, dim_range=(2, 512)) -> dict:
    """Residual of ``G^T G alpha = 1 / alpha`` and ratio error on random gradient pairs."""
    max_res = max_ratio_err = 0.0
    rejected = 0
    for i in range(pairs):
        rng = np.random.default_rng([seed, i])
        d = int(rng.integers(dim_range[0], dim_range[1] + 1))
        g1 = rng.standard_normal(d) * rng.uniform(0.1, 10.0)
        g2 = rng.standard_normal(d) * rng.uniform(0.1, 10.0)
        try:
            a1, a2 = nash_alpha_2task(g1, g2)
        except ValueError:
            rejected += 1
            continue
        gram = np.array([[g1 @ g1, g1 @ g2], [g1 @ g2, g2 @ g2]])
        alpha = np.array([a1, a2])
        max_res = max(max_res, float(np.max(np.abs(gram @ alpha - 1.0 / alpha))))
        expected = np.linalg.norm(g2) / np.linalg.norm(g1)
        max_ratio_err = max(max_ratio_err, float(abs(a1 / a2 - expected) / expected))
    return {
        "pairs": pairs,
        "rejected": rejected,
        "max_residual": max_res,
        "max_ratio_rel_error": max_ratio_err,
        "passed": rejected == 0 and max_res < 1e-8 and max_ratio_err < 1e-10,
    }


def random_layout(rng: np.random.Generator, max_tokens: int = 3) -> LayoutSpec:
    """One to ``max_tokens`` boxes, each at least 0.2 wide and tall."""
    k = int(rng.integers(1, max_tokens + 1))
    boxes = []
    for _ in range(k):
        w, h = rng.uniform(0.2, 0.8, size=2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        boxes.append([x, y, w, h])
    return LayoutSpec.from_boxes(boxes)


def gradcheck(
    instances: int = 100,
    seed: int = 0,
    shape=(8, 8, 4),
    normalization: str = "spatial",
    tol: float = 1e-4,
) -> dict:
    """Analytic energy gradient against central differences on random instances."""
    errors = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        layout = random_layout(rng)
        head = ToyAttentionHead(
            rng.standard_normal((len(layout), shape[-1])), float(rng.uniform(0.5, 2.0)),
            normalization=normalization,
        )
        lam = float(rng.uniform(0, 8))
        rho = float(rng.uniform(0, 5))
        z = rng.standard_normal(shape)
        analytic = energy_gradient(z, layout, head, rho, lam)
        numeric = fd_gradient_oracle(z, lambda x: naef_energy(x, layout, head, rho, lam))
        errors.append(float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-300)))
    worst = max(errors)
    return {"instances": instances, "normalization": normalization, "max_rel_error": worst,
            "median_rel_error": float(np.median(errors)), "passed": worst < tol}


def langevin_1d_check(
    chains: int = 256,
    burn_in: int = 5000,
    steps: int = 50000,
    snr: float = 0.06,
    seed: int = 0,
) -> dict:
    """Unconditioned chains on a 1-D standard normal; pooled moments after burn-in."""
    model = GaussianMixtureLatentModel.standard_normal((1, 1, 1))
    rng = np.random.default_rng(seed)
    state = ChainState(rng.standard_normal((chains, 1, 1, 1)), 0)
    config = LangevinConfig(snr=snr, steps=burn_in + steps, nu_mode="fixed", nu=0.0)
    s1 = s2 = 0.0
    for i in range(burn_in + steps):
        state = langevin_step(state, model, None, None, config, 0.0, rng)
        if i >= burn_in:
            z = state.z.ravel()
            s1 += z.sum()
            s2 += z @ z
    n = steps * chains
    mean = s1 / n
    var = s2 / n - mean**2
    return {"chains": chains, "steps": steps, "burn_in": burn_in, "mean": mean, "variance": var,
            "passed": abs(mean) < 0.05 and abs(var - 1) < 0.1}


def langevin_oracle_check(
    mh: bool = False,
    samples: int = 100_000,
    chains: int = 1000,
    burn_in: int = 2000,
    thin: int = 50,
    bins: int = 50,
    nu: float = 1.0,
    snr: float = 0.06,
    seed: int = 0,
    bound: float = 5.0,
) -> dict:
    """TV distance between Langevin samples and the grid posterior on a 1x2x1 latent.

    The prior is standard normal and the single token's box covers the left
    cell, so the energy pulls attention mass to that cell.
    """
    if samples % chains:
        raise ValueError("samples must be a multiple of chains")
    model = GaussianMixtureLatentModel.standard_normal((1, 2, 1))
    layout = LayoutSpec.from_boxes([[0.0, 0.0, 0.5, 1.0]])
    head = ToyAttentionHead(np.ones((1, 1)), 1.0, normalization="spatial")
    oracle = posterior_oracle(model, layout, head, nu, 0, [(-bound, bound)] * 2, resolution=501)
    per_chain = samples // chains
    total = burn_in + per_chain * thin
    config = LangevinConfig(snr=snr, steps=total, nu_mode="fixed", nu=nu, mh=mh)
    rng = np.random.default_rng(seed)
    state = ChainState(rng.standard_normal((chains, 1, 2, 1)), 0)
    out = []
    log = [] if mh else None
    for i in range(total):
        state = langevin_step(state, model, layout, head, config, 0.0, rng, log=log)
        if i >= burn_in and (i - burn_in) % thin == 0:
            out.append(state.z.reshape(chains, 2).copy())
    tv = histogram_tv(np.concatenate(out), oracle, bins)
    report = {"mh": mh, "samples": samples, "bins": bins, "tv": tv, "passed": tv < 0.15}
    if mh:
        report["accept_rate"] = float(np.mean([e["accept_rate"] for e in log]))
    return report


def _bench_rows(scenario: Scenario, weights, langevin, baseline, seeds, eta=DEFAULT_ETA) -> np.ndarray:
    model, head = scenario.model(), scenario.head()
    rows = []
    for s in seeds:
        m = guided_sample(model, scenario.layout, head, weights, langevin, baseline, s, eta, trace="none").metrics
        rows.append([m.mean_coverage, m.mean_spread, m.loglik])
    return np.array(rows)


def directional_bench(
    seeds: int = 50,
    scenario: Scenario | None = None,
    bisect_iters: int = 14,
    eta_max: float = 50.0,
    win_rate: float = 0.8,
    coverage_tol: float = 0.05,
) -> dict:
    """Directional comparisons between energies and update rules on the bench scenario.

    ``(a)`` NAEF versus AEF-only (``rho = 0``) under the backprop update, per-seed
    wins on coverage and spread. ``(b)`` adaptive Langevin versus a backprop run
    whose ``eta`` is bisected to the same mean coverage, per-seed wins on the
    final log-likelihood. ``(c)`` mean coverage ordering of the four
    energy/update combinations.
    """
    sc = scenario or Scenario()
    seeds = list(range(seeds))
    naef = GuidanceWeights(total_steps=sc.num_steps)
    aef = replace(naef, rho_max=0.0, rho_min=0.0)
    lconf = LangevinConfig()
    bp_aef = _bench_rows(sc, aef, lconf, "backprop", seeds)
    bp_naef = _bench_rows(sc, naef, lconf, "backprop", seeds)
    lv_aef = _bench_rows(sc, aef, lconf, "langevin", seeds)
    lv_naef = _bench_rows(sc, naef, lconf, "langevin", seeds)

    target = lv_naef[:, 0].mean()
    lo, hi = 0.0, eta_max
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if _bench_rows(sc, naef, lconf, "backprop", seeds, mid)[:, 0].mean() < target:
            lo = mid
        else:
            hi = mid
    eta = 0.5 * (lo + hi)
    bp_matched = _bench_rows(sc, naef, lconf, "backprop", seeds, eta)

    a_cov = float(np.mean(bp_naef[:, 0] > bp_aef[:, 0]))
    a_spr = float(np.mean(bp_naef[:, 1] > bp_aef[:, 1]))
    cov_gap = float(bp_matched[:, 0].mean() - target)
    b_win = float(np.mean(lv_naef[:, 2] > bp_matched[:, 2]))
    means = {k: float(v[:, 0].mean()) for k, v in
             (("aef_backprop", bp_aef), ("naef_backprop", bp_naef), ("aef_langevin", lv_aef), ("naef_langevin", lv_naef))}
    base, both = means["aef_backprop"], means["naef_langevin"]
    singles = (means["naef_backprop"], means["aef_langevin"])
    return {
        "seeds": len(seeds),
        "a": {"coverage_win_rate": a_cov, "spread_win_rate": a_spr,
              "passed": a_cov >= win_rate and a_spr >= win_rate},
        "b": {"eta": eta, "coverage_gap": cov_gap, "loglik_win_rate": b_win,
              "mean_loglik_gap": float(lv_naef[:, 2].mean() - bp_matched[:, 2].mean()),
              "passed": abs(cov_gap) <= coverage_tol and b_win >= win_rate},
        "c": {"mean_coverage": means,
              "passed": all(base < s < both for s in singles)},
    }
