import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layoutguide.energy import (
    DegenerateAttentionError,
    GuidanceWeights,
    aef_energy,
    energy_gradient,
    fd_gradient_oracle,
    naef_breakdown,
    naef_energy,
    naef_total,
    naef_value_and_grad,
    nap_divergence,
    rho_at,
)
from layoutguide.grid import BoundingBox, LayoutSpec, nonlocal_prior, rasterize_mask
from layoutguide.head import ToyAttentionHead
from layoutguide.verify import random_layout

prob_vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(1e-3, 1.0)).map(lambda x: x / x.sum())


class TestAef:
    def test_all_inside(self):
        a = np.zeros((4, 4))
        a[0, 0] = 1.0
        assert aef_energy(a, rasterize_mask(BoundingBox(0, 0, 0.5, 0.5), 4, 4)) == 0.0

    def test_uniform_quarter_coverage(self):
        assert aef_energy(np.full((4, 4), 1 / 16), rasterize_mask(BoundingBox(0, 0, 0.5, 0.5), 4, 4)) == 0.5625

    def test_all_outside(self):
        a = np.zeros((4, 4))
        a[3, 3] = 1.0
        assert aef_energy(a, rasterize_mask(BoundingBox(0, 0, 0.5, 0.5), 4, 4)) == 1.0

    @given(arrays(np.float64, (3, 3), elements=st.floats(0, 1)), arrays(bool, (3, 3)))
    def test_bounded(self, a, m):
        if a.sum() == 0:
            with pytest.raises(DegenerateAttentionError):
                aef_energy(a, m)
            return
        e = aef_energy(a, m)
        assert 0.0 <= e <= 1.0
        leak = a[~m].sum() / a.sum()
        if leak == 0:
            assert e < 1e-18
        if e == 0:
            assert leak < 1e-9


class TestNap:
    def test_identical(self):
        tau = nonlocal_prior(BoundingBox(0, 0, 0.75, 0.75), 6, 6, 4.0)
        assert abs(nap_divergence(tau, tau, tau.mask)) < 1e-12

    def test_point_mass_against_uniform(self):
        m = np.ones((1, 5), bool)
        a = np.zeros((1, 5))
        a[0, 2] = 1.0
        assert nap_divergence(a, np.full((1, 5), 0.2), m) == pytest.approx(np.log(5), abs=1e-14)

    def test_hand_value(self):
        m = np.ones((1, 2), bool)
        got = nap_divergence([[0.9, 0.1]], [[0.5, 0.5]], m)
        assert got == pytest.approx(0.9 * np.log(1.8) + 0.1 * np.log(0.2), abs=1e-14)
        assert got == pytest.approx(0.3681, abs=1e-4)

    def test_only_in_mask_mass_counts(self):
        m = np.array([[True, True, False]])
        assert nap_divergence([[0.2, 0.2, 0.6]], [[0.5, 0.5, 0.0]], m) == pytest.approx(0.0, abs=1e-15)

    def test_zero_mass_in_mask(self):
        with pytest.raises(DegenerateAttentionError):
            nap_divergence([[0.0, 1.0]], [[1.0, 0.0]], np.array([[True, False]]))

    @given(prob_vectors, st.data())
    def test_gibbs(self, p, data):
        q = data.draw(arrays(np.float64, p.shape, elements=st.floats(1e-3, 1.0))).reshape(1, -1)
        q = q / q.sum()
        m = np.ones_like(q, bool)
        kl = nap_divergence(p.reshape(1, -1), q, m)
        ref = float(np.sum(p * np.log(p / q.ravel())))
        assert kl >= -1e-15
        assert kl == pytest.approx(ref, rel=1e-12, abs=1e-15)
        if np.allclose(p, q.ravel(), rtol=0, atol=1e-15):
            assert abs(kl) < 1e-12


class TestRho:
    def test_endpoints(self):
        w = GuidanceWeights()
        assert (rho_at(0, w), rho_at(9, w)) == (5.0, 0.0)

    def test_midpoint(self):
        assert rho_at(4, GuidanceWeights()) == pytest.approx(5 - 5 * 4 / 9, abs=1e-14)

    def test_out_of_window(self):
        with pytest.raises(ValueError):
            rho_at(10, GuidanceWeights())

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            GuidanceWeights(rho_max=1.0, rho_min=2.0)
        with pytest.raises(ValueError):
            GuidanceWeights(guidance_steps=0)


def _two_token_setup():
    layout = LayoutSpec.from_boxes([[0, 0, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]])
    rng = np.random.default_rng(3)
    maps = [rng.random((4, 4)) for _ in layout]
    maps = [a / a.sum() for a in maps]
    priors = [nonlocal_prior(e.box, 4, 4, 4.0) for e in layout]
    return layout, maps, priors


class TestNaefTotal:
    def test_single_token_at_optimum(self):
        layout = LayoutSpec.from_boxes([[0, 0, 0.5, 0.5]])
        tau = nonlocal_prior(layout.entries[0].box, 4, 4, 4.0)
        assert naef_total([tau.values], layout, [tau], 5.0).total == pytest.approx(0.0, abs=1e-15)

    def test_rho_zero_is_aef(self):
        layout, maps, priors = _two_token_setup()
        masks = [rasterize_mask(e.box, 4, 4) for e in layout]
        assert naef_total(maps, layout, priors, 0.0).total == sum(aef_energy(a, m) for a, m in zip(maps, masks))

    def test_additive_and_linear_in_rho(self):
        layout, maps, priors = _two_token_setup()
        both = naef_total(maps, layout, priors, 2.0)
        parts = [naef_total([a], LayoutSpec([e]), [p], 2.0).total for a, e, p in zip(maps, layout, priors)]
        assert both.total == pytest.approx(sum(parts), rel=1e-14)
        e0, e1 = naef_total(maps, layout, priors, 0.0).total, naef_total(maps, layout, priors, 1.0).total
        assert naef_total(maps, layout, priors, 3.5).total == pytest.approx(e0 + 3.5 * (e1 - e0), rel=1e-13)


class TestFdOracle:
    def test_quadratic(self):
        z = np.random.default_rng(0).standard_normal((3, 3, 2))
        np.testing.assert_allclose(fd_gradient_oracle(z, lambda x: 0.5 * np.sum(x * x)), z, atol=1e-8)

    def test_linear(self):
        rng = np.random.default_rng(1)
        z, g = rng.standard_normal((2, 3, 3, 2))
        np.testing.assert_allclose(fd_gradient_oracle(z, lambda x: np.sum(g * x)), g, atol=1e-8)


@pytest.mark.parametrize("normalization", ["spatial", "token"])
def test_gradient_matches_finite_differences(normalization):
    rng = np.random.default_rng(42)
    for _ in range(10):
        layout = random_layout(rng)
        head = ToyAttentionHead(rng.standard_normal((len(layout) + 1, 2)), 0.7, normalization=normalization)
        rho, lam = rng.uniform(0, 5), rng.uniform(0, 8)
        z = rng.standard_normal((4, 4, 2))
        g = energy_gradient(z, layout, head, rho, lam)
        fd = fd_gradient_oracle(z, lambda x: naef_energy(x, layout, head, rho, lam))
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_gradient_vanishes_at_minimum():
    # full-grid box: aef is 0 and the kl term vanishes when attention equals the prior
    layout = LayoutSpec.from_boxes([[0, 0, 1, 1]])
    head = ToyAttentionHead(np.array([[0.6, 0.8]]), 1.0, normalization="spatial")
    tau = nonlocal_prior(layout.entries[0].box, 5, 5, 4.0).values
    z = np.log(tau)[..., None] * head.projections[0]
    assert naef_energy(z, layout, head, 3.0) < 1e-14
    assert np.linalg.norm(energy_gradient(z, layout, head, 3.0)) < 1e-8


def test_scaled_energy_scales_gradient():
    rng = np.random.default_rng(5)
    layout = random_layout(rng)
    head = ToyAttentionHead(rng.standard_normal((len(layout), 3)), 1.0)
    z = rng.standard_normal((5, 5, 3))
    g = energy_gradient(z, layout, head, 2.0)
    fd = fd_gradient_oracle(z, lambda x: 7.0 * naef_energy(x, layout, head, 2.0))
    assert np.linalg.norm(7.0 * g - fd) / np.linalg.norm(fd) < 1e-6


def test_small_descent_step_decreases_energy():
    rng = np.random.default_rng(9)
    for _ in range(20):
        layout = random_layout(rng)
        head = ToyAttentionHead(rng.standard_normal((len(layout), 4)), rng.uniform(0.5, 2))
        z = rng.standard_normal((8, 8, 4))
        e0, g = naef_value_and_grad(z, layout, head, 5.0, 4.0)
        eta = 1.0
        for _ in range(20):
            if naef_energy(z - eta * g, layout, head, 5.0) < e0:
                break
            eta /= 2
        else:
            pytest.fail("no decrease within 20 halvings")


def test_batched_matches_single():
    rng = np.random.default_rng(2)
    layout = LayoutSpec.from_boxes([[0, 0, 0.5, 1], [0.5, 0, 0.5, 1]])
    head = ToyAttentionHead.from_seed(2, 3, 0, normalization="token")
    z = rng.standard_normal((3, 2, 4, 4, 3))
    e, g = naef_value_and_grad(z, layout, head, 1.5, 4.0)
    assert e.shape == (3, 2) and g.shape == z.shape
    for idx in np.ndindex(3, 2):
        e1, g1 = naef_value_and_grad(z[idx], layout, head, 1.5, 4.0)
        assert e[idx] == pytest.approx(float(e1), rel=1e-13)
        np.testing.assert_allclose(g[idx], g1, rtol=1e-12, atol=1e-15)


def test_breakdown_matches_energy():
    rng = np.random.default_rng(4)
    layout = LayoutSpec.from_boxes([[0, 0, 0.5, 1], [0.5, 0, 0.5, 1]])
    head = ToyAttentionHead.from_seed(2, 3, 0)
    z = rng.standard_normal((4, 4, 3))
    br = naef_breakdown(z, layout, head, 2.0)
    assert br.total == pytest.approx(naef_energy(z, layout, head, 2.0), rel=1e-13)
    assert br.total == pytest.approx(br.aef + 2.0 * br.nap, rel=1e-13)
    assert [t.token for t in br.tokens] == [0, 1]
