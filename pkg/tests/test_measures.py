"""Tests for CRM realization: tail mass, inversion, Ferguson-Klass draws."""
import mpmath
import numpy as np
import pytest
from scipy import stats

from tiltcrm import (BaseMeasure, DiscreteMeasure, LevyIntensity,
                     TruncationUnderflow, invert_tail, sample_crm,
                     sample_posterior_crm, tail_mass)


@pytest.fixture
def base():
    return BaseMeasure(0.0, 1.0)


@pytest.fixture
def gamma1(base):
    return LevyIntensity.gamma_process(1.0, base)


def e1_oracle(x):
    """High-precision exponential integral, independent of scipy."""
    return float(mpmath.e1(mpmath.mpf(x)))


class TestTailMass:
    def test_matches_e1_oracle(self, gamma1):
        for v in [0.01, 0.1, 1.0, 5.0, 30.0]:
            assert tail_mass(v, gamma1) == pytest.approx(e1_oracle(v), rel=1e-12)

    def test_e1_at_one(self, gamma1):
        assert tail_mass(1.0, gamma1) == pytest.approx(0.21938, abs=5e-6)

    def test_decay(self, gamma1):
        assert tail_mass(50.0, gamma1) < 1e-20

    def test_linearity_in_alpha(self, base, gamma1):
        gamma2 = LevyIntensity.gamma_process(2.0, base)
        for v in [0.05, 0.7, 3.0]:
            assert tail_mass(v, gamma2) == pytest.approx(2 * tail_mass(v, gamma1))

    def test_monotone_nonincreasing(self, gamma1):
        vs = np.logspace(-4, 1.5, 40)
        ns = [tail_mass(v, gamma1) for v in vs]
        assert np.all(np.diff(ns) <= 0)

    def test_tilted_quadrature(self, base):
        # psi constant c: N(v) = alpha * E1(v(1+c)) exactly, quadrature or not
        intensity = LevyIntensity(
            LevyIntensity.POSTERIOR_TILTED, 1.5, base, psi=lambda z: 2.0 * np.ones_like(z))
        for v in [0.1, 1.0, 4.0]:
            assert tail_mass(v, intensity) == pytest.approx(
                1.5 * e1_oracle(3.0 * v), rel=1e-10)

    def test_rejects_nonpositive_v(self, gamma1):
        with pytest.raises(ValueError):
            tail_mass(0.0, gamma1)


class TestInvertTail:
    def test_round_trip(self, gamma1):
        for s in np.logspace(-6, 1, 15):
            xi = tail_mass(s, gamma1)
            assert invert_tail(xi, gamma1) == pytest.approx(s, rel=1e-8)

    def test_e1_derived_value(self, gamma1):
        assert invert_tail(e1_oracle(1.0), gamma1) == pytest.approx(1.0, rel=1e-8)

    def test_monotone_decreasing(self, gamma1):
        xis = np.linspace(0.05, 8.0, 25)
        ss = [invert_tail(x, gamma1) for x in xis]
        assert np.all(np.diff(ss) < 0)

    def test_underflow(self, gamma1):
        with pytest.raises(TruncationUnderflow):
            invert_tail(1e6, gamma1)

    def test_tilted_round_trip(self, base):
        rng = np.random.default_rng(3)
        intensity = LevyIntensity.posterior(
            1.0, base, u=rng.random(4), theta=rng.normal(size=4))
        for s in [1e-5, 1e-2, 0.5, 2.0]:
            xi = tail_mass(s, intensity)
            assert invert_tail(xi, intensity) == pytest.approx(s, rel=1e-8)


class TestSampleCrm:
    def test_weights_strictly_decreasing(self, gamma1):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = sample_crm(gamma1, 100, rng)
            assert np.all(np.diff(m.weights) < 0)

    def test_total_mass_gamma_law(self, gamma1):
        rng = np.random.default_rng(1)
        totals = [sample_crm(gamma1, 2000, rng).total_mass for _ in range(600)]
        res = stats.kstest(totals, stats.gamma(a=1.0, scale=1.0).cdf)
        assert res.pvalue > 0.01

    def test_total_mass_gamma_law_alpha3(self, base):
        intensity = LevyIntensity.gamma_process(3.0, base)
        rng = np.random.default_rng(2)
        totals = [sample_crm(intensity, 2000, rng).total_mass for _ in range(600)]
        res = stats.kstest(totals, stats.gamma(a=3.0, scale=1.0).cdf)
        assert res.pvalue > 0.01

    def test_truncation_error_decreases_with_h(self, base):
        # with a heavy intensity the first atoms do not exhaust the mass,
        # so the truncated total-mass law visibly improves as H grows
        intensity = LevyIntensity.gamma_process(30.0, base)
        rng = np.random.default_rng(4)
        ks = []
        for H in [50, 200, 2000]:
            totals = [sample_crm(intensity, H, rng).total_mass
                      for _ in range(400)]
            ks.append(stats.kstest(totals, stats.gamma(a=30.0, scale=1.0).cdf).statistic)
        assert ks[0] > ks[1] > ks[2] - 0.05
        assert ks[2] < 0.1

    def test_tilted_with_zero_psi_locations_match_g0(self, base):
        # psi == 0 shifts the exponent by e^{-s}; the location law is G0
        intensity = LevyIntensity(
            LevyIntensity.POSTERIOR_TILTED, 1.0, base, psi=lambda z: np.zeros_like(z))
        rng = np.random.default_rng(5)
        locs = np.concatenate(
            [sample_crm(intensity, 50, rng).locations for _ in range(100)])
        ref = rng.random(locs.size)
        res = stats.ks_2samp(locs, ref)
        assert res.pvalue > 0.01

    def test_dirichlet_cell_means(self, gamma1):
        # normalized draw binned into 10 cells: Dirichlet(alpha/10,...) means
        rng = np.random.default_rng(6)
        R = 800
        probs = np.zeros((R, 10))
        edges = np.linspace(0, 1, 11)
        for r in range(R):
            m = sample_crm(gamma1, 2000, rng)
            idx = np.clip(np.digitize(m.locations, edges) - 1, 0, 9)
            probs[r] = np.bincount(idx, weights=m.weights, minlength=10)
            probs[r] /= probs[r].sum()
        se = probs.std(axis=0, ddof=1) / np.sqrt(R)
        assert np.all(np.abs(probs.mean(axis=0) - 0.1) < 3 * se + 1e-12)

    def test_invalid_h(self, gamma1):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_crm(gamma1, 0, rng)


class TestSamplePosteriorCrm:
    def test_fixed_atom_weight_mean(self, base):
        # Gamma(n*=3, psi+1=2): mean 1.5
        rng = np.random.default_rng(7)
        theta = np.array([0.0])
        u = np.array([1.0])  # psi(z) = 1 for all z since theta = 0
        draws = []
        for _ in range(10000):
            m = sample_posterior_crm(u, theta, np.array([0.5]), np.array([3]),
                                     1.0, base, 5, rng)
            draws.append(m.weights[-1])
        draws = np.asarray(draws)
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert abs(draws.mean() - 1.5) < 3 * se

    def test_no_latents_reduces_to_gamma_crm(self, base):
        rng = np.random.default_rng(8)
        totals = [sample_posterior_crm(np.empty(0), np.empty(0), np.empty(0),
                                       np.empty(0, dtype=int), 1.0, base, 2000,
                                       rng).total_mass
                  for _ in range(500)]
        res = stats.kstest(totals, stats.gamma(a=1.0, scale=1.0).cdf)
        assert res.pvalue > 0.01

    def test_large_u_kills_fixed_atom(self, base):
        rng = np.random.default_rng(9)
        means = []
        for big_u in [1.0, 1e3, 1e6]:
            ws = [sample_posterior_crm(np.array([big_u]), np.array([0.0]),
                                       np.array([0.5]), np.array([1]),
                                       1.0, base, 3, rng).weights[-1]
                  for _ in range(2000)]
            means.append(np.mean(ws))
        assert means[0] > means[1] > means[2]
        assert means[2] == pytest.approx(1.0 / (1e6 + 1.0), rel=0.2)

    def test_length_mismatch(self, base):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_posterior_crm(np.array([1.0]), np.array([0.0]),
                                 np.array([0.5, 0.6]), np.array([1]),
                                 1.0, base, 5, rng)


class TestDiscreteMeasure:
    def test_rejects_nonpositive_weight(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.array([0.5]), np.array([0.0]))

    def test_rejects_out_of_support(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.array([1.5]), np.array([1.0]), support=(0, 1))

    def test_cdf_and_mean(self):
        m = DiscreteMeasure(np.array([0.25, 0.75]), np.array([1.0, 3.0]))
        assert m.mean() == pytest.approx(0.625)
        assert m.cdf(0.1) == 0.0
        assert m.cdf(0.5) == pytest.approx(0.25)
        assert m.cdf(0.9) == pytest.approx(1.0)
