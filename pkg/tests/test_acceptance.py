"""Acceptance criteria 1-9, one test each (criterion 8 has three parts).

Each test records a PASS/FAIL line that is printed in the pytest summary, or
directly when this file is run as a script.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from layoutguide.bench import GaussianMixtureLatentModel, Scenario
from layoutguide.dynamics import verify_theorem1
from layoutguide.energy import GuidanceWeights, aef_energy, energy_gradient, nap_divergence, rho_at
from layoutguide.experiment import ExperimentPlan, dumps, run_experiment
from layoutguide.grid import BoundingBox, nonlocal_prior, rasterize_mask
from layoutguide.langevin import ChainState, adaptive_nu, conditional_score
from layoutguide.verify import (
    directional_bench,
    gradcheck,
    langevin_1d_check,
    langevin_oracle_check,
    nash_residual_summary,
)


def record(name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def test_1_theorem_harness():
    rep, secs = timed(verify_theorem1, 10_000, 0)
    ok = (rep.passed == rep.evaluated and rep.evaluated > 0 and rep.max_identity_error < 1e-12 and secs < 10)
    record("1 ratio amplification", ok,
           f"{rep.passed}/{rep.evaluated} strict ({rep.filtered} ties filtered), "
           f"identity err {rep.max_identity_error:.2e}, {secs:.1f}s")


def test_2_nash_weights():
    rep, secs = timed(nash_residual_summary, 1000, 0, (2, 512))
    ok = rep["passed"] and secs < 5
    record("2 nash weights", ok,
           f"residual {rep['max_residual']:.2e}, ratio err {rep['max_ratio_rel_error']:.2e}, "
           f"{rep['rejected']} rejected, {secs:.2f}s")


def test_3_gradient_check():
    rep, secs = timed(gradcheck, 100, 0, (8, 8, 4), "spatial")
    tok = gradcheck(20, 1, (8, 8, 4), "token")
    ok = rep["passed"] and tok["passed"] and secs < 60
    record("3 gradient check", ok,
           f"max rel err {rep['max_rel_error']:.2e} spatial (100), {tok['max_rel_error']:.2e} token (20), {secs:.1f}s")


def test_4_langevin_sanity():
    rep, secs = timed(langevin_1d_check)
    ok = rep["passed"] and secs < 10
    record("4 langevin 1-D", ok,
           f"mean {rep['mean']:+.4f}, var {rep['variance']:.4f} over {rep['chains']} chains, {secs:.1f}s")


def test_5_posterior_oracle():
    rep, secs = timed(langevin_oracle_check, mh=False)
    ok = rep["passed"] and secs < 120
    record("5 posterior oracle", ok, f"TV {rep['tv']:.4f} with {rep['samples']} samples, {secs:.1f}s")


def test_6_energy_analytics():
    mask = rasterize_mask(BoundingBox(0, 0, 0.5, 0.5), 4, 4)
    aef = aef_energy(np.full((4, 4), 1 / 16), mask)
    tau = nonlocal_prior(BoundingBox(0.1, 0.2, 0.6, 0.5), 10, 10, 4.0)
    kl = nap_divergence(tau, tau, tau.mask)
    w = GuidanceWeights()
    ends = (rho_at(0, w), rho_at(w.guidance_steps - 1, w))
    ok = aef == 0.5625 and abs(kl) <= 1e-12 and ends == (5.0, 0.0)
    record("6 energy analytics", ok, f"aef {aef!r}, kl {kl:.1e}, rho endpoints {ends}")


def test_7_scale_invariance():
    sc = Scenario()
    model, head = sc.model(), sc.head()
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in (45, 40, 30):
        state = ChainState(rng.standard_normal((16, 16, 4)), t)
        score = model.score(state.z, t)
        g = energy_gradient(state, sc.layout, head, 5.0)
        ref = conditional_score(state, model, g, adaptive_nu(score, g))
        for c in (0.01, 1.0, 100.0):
            got = conditional_score(state, model, c * g, adaptive_nu(score, c * g))
            worst = max(worst, float(np.max(np.abs(got - ref))))
    record("7 scale invariance", worst <= 1e-12, f"max |diff| {worst:.2e} for c in (0.01, 1, 100)")


@pytest.fixture(scope="module")
def bench_result():
    t0 = time.perf_counter()
    res = directional_bench(50)
    res["seconds"] = time.perf_counter() - t0
    return res


def test_8a_naef_vs_aef(bench_result):
    a = bench_result["a"]
    record("8a NAEF vs AEF", a["passed"] and bench_result["seconds"] < 600,
           f"coverage wins {a['coverage_win_rate']:.0%}, spread wins {a['spread_win_rate']:.0%} "
           f"(backprop update, 50 seeds)")


def test_8b_langevin_vs_backprop(bench_result):
    b = bench_result["b"]
    record("8b adaptive Langevin vs backprop", b["passed"],
           f"loglik wins {b['loglik_win_rate']:.0%}, mean gap {b['mean_loglik_gap']:+.2f} nats "
           f"at coverage gap {b['coverage_gap']:+.4f} (eta {b['eta']:.4f})")


def test_8c_component_ordering(bench_result):
    c = bench_result["c"]["mean_coverage"]
    record("8c component ordering", bench_result["c"]["passed"],
           "coverage " + ", ".join(f"{k} {v:.3f}" for k, v in c.items())
           + f"; bench {bench_result['seconds']:.0f}s")


def test_9_determinism():
    def reports():
        plan = ExperimentPlan(Scenario(), ["none", "backprop", "langevin-fixed", "langevin-adaptive"], list(range(5)))
        return (
            dumps(run_experiment(plan, write=False).to_dict()),
            dumps(verify_theorem1(2000, 0).to_dict()),
            dumps(langevin_oracle_check(samples=2000, chains=100, burn_in=200, thin=5)),
            dumps(gradcheck(3, 0)),
        )

    first, second = reports(), reports()
    same = [a.encode() == b.encode() for a, b in zip(first, second)]
    record("9 determinism", all(same), f"{sum(same)}/{len(same)} reports byte-identical")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
