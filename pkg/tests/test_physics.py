"""Analytic models, correction pipeline, quadrature cross-checks and fits."""

import numpy as np
import pytest
from scipy.integrate import quad

import g2lab as g2
from g2lab.core import Correlogram
from g2lab.physics import afterpulse_profile_from_tail


def make_corr(lags, g2_values=None, kind="raw", **tallies):
    n = len(lags)
    defaults = dict(
        coincidences=np.full(n, 100),
        ki=np.full(n, 10000),
        kj=np.full(n, 10000),
        valid_bins=np.full(n, 1000000),
    )
    defaults.update(tallies)
    return Correlogram(
        lags=np.asarray(lags),
        kind=kind,
        bin_width=1e-9,
        window_bins=5000,
        series_count=100,
        channels=(0, 1),
        g2_values=g2_values,
        **defaults,
    )


class TestTable1:
    thermal = g2.LightStateModel(
        "thermal", angular_width=1e-3, wavelength=546e-9, coherence_time=2e-9
    )
    entangled = g2.LightStateModel(
        "entangled", angular_width=1e-3, wavelength=546e-9, coherence_time=2e-9
    )

    def test_coherent_flat(self):
        m = g2.LightStateModel("coherent")
        assert g2.table1_g1(m, 1e-3, 5e-9) == 1.0
        assert g2.table1_g2(m, 1e-3, 5e-9) == 1.0

    def test_incoherent(self):
        m = g2.LightStateModel("incoherent")
        assert g2.table1_g1(m, 0.0, 0.0) == 0.0
        assert g2.table1_g2(m, 0.0, 0.0) == 1.0

    def test_thermal_peak(self):
        assert g2.table1_g2(self.thermal, 0.0, 0.0) == pytest.approx(2.0)
        assert g2.table1_g1(self.thermal, 0.0, 0.0) == pytest.approx(1.0)

    def test_thermal_sinc_zero(self):
        x = 546e-9 / 1e-3  # theta * x / lambda = 1
        assert g2.table1_g2(self.thermal, x, 0.0) == pytest.approx(1.0, abs=1e-12)

    def test_thermal_consistency_g2_from_g1(self):
        xs = np.linspace(0, 2e-3, 7)
        taus = np.linspace(0, 6e-9, 7)
        for x in xs:
            for tau in taus:
                g1 = g2.table1_g1(self.thermal, x, tau)
                assert g2.table1_g2(self.thermal, x, tau) == pytest.approx(1 + g1 * g1)

    def test_entangled_unit_peak(self):
        assert g2.table1_g2(self.entangled, 0.0, 0.0) == pytest.approx(1.0)
        assert g2.table1_g1(self.entangled, 0.0, 0.0) == 0.0

    def test_bad_state(self):
        with pytest.raises(ValueError):
            g2.LightStateModel("squeezed")
        with pytest.raises(ValueError):
            g2.LightStateModel("thermal")  # missing parameters


class TestAfterpulseInversion:
    def test_flat_tail_gives_zero(self):
        taus = np.arange(14, 100) * 1e-9
        prof = afterpulse_profile_from_tail(taus, np.ones(taus.size), 1e6, 0.07)
        assert np.allclose(prof.density, 0.0)
        assert prof.epsilon_hat == pytest.approx(0.0, abs=1e-12)

    def test_synthetic_exponential_exact(self):
        """Substituting g2 = 1 + A exp(-(tau-t0)/tau_A) recovers the density."""
        mu, eps, tau_a, amp = 2e6, 0.07, 40e-9, 1.3
        taus = (14 + np.arange(400)) * 1e-9
        tail = 1.0 + amp * np.exp(-(taus - taus[0]) / tau_a)
        prof = afterpulse_profile_from_tail(taus, tail, mu, eps)
        expected = amp * (1 + eps) ** 2 * mu * np.exp(-(taus - taus[0]) / tau_a)
        assert np.allclose(prof.density, expected, rtol=1e-12)
        assert prof.decay_time == pytest.approx(tau_a, rel=1e-6)
        analytic_integral = amp * (1 + eps) ** 2 * mu * tau_a * (
            1 - np.exp(-(taus[-1] - taus[0]) / tau_a)
        )
        assert prof.epsilon_hat == pytest.approx(analytic_integral, rel=1e-3)

    def test_dead_band_lags_rejected(self):
        corr = make_corr(np.arange(0, 10))  # all lags inside 13 ns dead time
        with pytest.raises(ValueError, match="dead time"):
            g2.correct_auto(corr, 1e6, 0.07, 13e-9)


class TestCorrectCross:
    def test_pure_background_corrects_to_unity(self):
        lags = np.arange(-5, 6)
        rng = np.random.default_rng(3)
        meas = make_corr(lags, coincidences=rng.integers(50, 150, lags.size))
        out = g2.correct_cross(meas, meas, 0.07)
        assert out.kind == "corrected"
        assert np.allclose(out.g2, 1.0)

    def test_excess_rescaled_by_afterpulse_factor(self):
        lags = np.array([0])
        meas = make_corr(lags, g2_values=np.array([1.4367]), kind="raw")
        bg = make_corr(lags, g2_values=np.array([1.0]), kind="background")
        out = g2.correct_cross(meas, bg, 0.07)
        assert out.g2[0] == pytest.approx(1.0 + 1.07**2 * 0.4367)

    def test_lag_grid_mismatch_rejected(self):
        with pytest.raises(ValueError, match="lag-grid"):
            g2.correct_cross(make_corr(np.arange(3)), make_corr(np.arange(1, 4)), 0.07)

    def test_sigma_quadrature(self):
        lags = np.array([0])
        meas = make_corr(lags)
        bg = make_corr(lags, coincidences=np.array([400]))
        out = g2.correct_cross(meas, bg, 0.0)
        expected = np.hypot(meas.sigma_stat()[0], bg.sigma_stat()[0])
        assert out.sigma[0] == pytest.approx(expected)

    def test_corrected_never_negative(self):
        lags = np.array([0])
        meas = make_corr(lags, g2_values=np.array([0.2]))
        bg = make_corr(lags, g2_values=np.array([1.5]))
        out = g2.correct_cross(meas, bg, 0.07)
        assert out.g2[0] == 0.0


class TestMixG2:
    def test_single_component_identity(self):
        assert g2.mix_g2([(1.73, 5.0, 5.0)]) == pytest.approx(1.73)

    def test_partial_intensity_weights(self):
        """Two components at the measured line and total rates."""
        i_line, i_total = 6.8e3, 17.8e3
        weight = (i_line / i_total) ** 2
        got = g2.mix_g2(
            [(1.5, i_line, i_line), (1.0, i_total - i_line, i_total - i_line)]
        )
        assert got == pytest.approx(1.0 + 0.5 * weight)
        assert weight == pytest.approx(0.146, abs=0.002)

    def test_afterpulses_as_uncorrelated_admixture(self):
        """Afterpulses at fraction eps/(1+eps) reproduce the (1+eps)^-2 dilution."""
        eps, g2a = 0.07, 1.8
        base = 1e6
        mixed = g2.mix_g2([(g2a, base, base), (1.0, eps * base, eps * base)])
        assert mixed == pytest.approx(1.0 + (g2a - 1.0) / (1.0 + eps) ** 2, rel=1e-12)

    def test_array_components(self):
        taus = np.linspace(0, 1, 5)
        comp = 1.0 + 0.5 * np.cos(taus)
        got = g2.mix_g2([(comp, 1.0, 1.0), (1.0, 1.0, 1.0)])
        assert np.allclose(got, 1.0 + (comp - 1.0) * 0.25)


class TestVanCittertZernike:
    w, lam, dist = 200e-6, 546e-9, 0.02

    def baseline_for(self, fn):
        return fn * self.lam * self.dist / self.w

    def test_uniform_profile_matches_closed_form(self):
        for fn in np.linspace(0.0, 3.0, 31):
            got = g2.g2_vcz(
                lambda x: 1.0, (-self.w / 2, self.w / 2),
                self.baseline_for(fn), self.lam, self.dist,
            )
            assert abs(got - g2.g2_thermal_uniform(fn)) < 1e-9

    def test_cosine_profile_matches_closed_form(self):
        gamma, omega = -0.3, 2.8 * np.pi / self.w
        prof = lambda x: 1.0 + gamma * np.cos(omega * x)
        for fn in np.linspace(0.0, 3.0, 31):
            got = g2.g2_vcz(
                prof, (-self.w / 2, self.w / 2),
                self.baseline_for(fn), self.lam, self.dist,
            )
            want = g2.g2_cosine_profile(fn, gamma, omega, self.w)
            assert abs(got - want) < 1e-6

    def test_zero_baseline_unpolarized_maximum(self):
        got = g2.g2_vcz(lambda x: 1.0, (-self.w / 2, self.w / 2), 0.0, self.lam, self.dist)
        assert got == pytest.approx(1.5)

    def test_temporal_decay(self):
        val = g2.g2_cosine_profile(0.0, -0.3, 2.8 * np.pi / self.w, self.w,
                                   tau=1e-6, coherence_time=5e-9)
        assert val == pytest.approx(1.0)

    def test_gamma_zero_reduces_to_uniform(self):
        fn = np.linspace(0, 3, 61)
        a = g2.g2_cosine_profile(fn, 0.0, 5e4, self.w)
        b = g2.g2_thermal_uniform(fn)
        assert np.allclose(a, b, atol=1e-14)

    def test_continuity_and_floor(self):
        fn = np.linspace(0, 3, 2001)
        vals = g2.g2_cosine_profile(fn, -0.3, 2.8 * np.pi / self.w, self.w)
        assert np.all(np.isfinite(vals))
        assert np.all(vals >= 1.0)
        assert np.max(np.abs(np.diff(vals))) < 0.01  # no jumps across sinc poles

    def test_revival_shape(self):
        """Modulated profile: null near FN = 1 and a weak revival near 1.2."""
        fn = np.linspace(0.0, 1.5, 301)
        vals = g2.g2_cosine_profile(fn, -0.3, 2.8 * np.pi / self.w, self.w)
        n_min = fn[np.argmin(vals)]
        assert 0.8 < n_min < 1.1
        after = (fn > n_min + 0.05)
        revival = vals[after].max()
        assert revival > vals.min() + 0.01
        assert revival < vals[0]  # smaller than the zero-baseline peak

    def test_zero_intensity_rejected(self):
        with pytest.raises(ValueError, match="total intensity"):
            g2.g2_vcz(lambda x: 0.0, (-1e-4, 1e-4), 0.0, self.lam, self.dist)

    def test_negative_profile_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            g2.g2_vcz(lambda x: -1.0, (-1e-4, 1e-4), 0.0, self.lam, self.dist)


class TestModeCount:
    def test_reference_value(self):
        # w = 200 um, x = 100 um, lambda = 546 nm, L = 2 cm
        q = g2.mode_count(200e-6, 100e-6, 546e-9, 0.02)
        assert q == pytest.approx(2.069, abs=2e-3)
        fn = g2.fresnel_number(200e-6, 100e-6, 546e-9, 0.02)
        assert fn == pytest.approx(1.832, abs=2e-3)

    def test_zero_baseline_degenerate(self):
        assert g2.mode_count(200e-6, 0.0, 546e-9, 0.02) == 0.0

    def test_unity_at_four_over_pi(self):
        baseline = (4 / np.pi) * 546e-9 * 0.02 / 200e-6
        assert g2.mode_count(200e-6, baseline, 546e-9, 0.02) == pytest.approx(1.0)


class TestNearFieldFit:
    w = 200e-6

    def synth(self, gamma, omega, noise, seed, n=8):
        rng = np.random.default_rng(seed)
        fn = np.linspace(0.05, 1.5, n)
        y = g2.g2_cosine_profile(fn, gamma, omega, self.w)
        y = y + rng.normal(0, noise * np.abs(y - 1.0))
        return np.column_stack([fn, y])

    def test_recovery(self):
        pts = self.synth(-0.3, 2.8 * np.pi / self.w, 0.01, seed=42)
        res = g2.fit_near_field(pts, self.w)
        assert res.converged
        assert res.gamma == pytest.approx(-0.3, abs=0.05)
        assert res.omega == pytest.approx(2.8 * np.pi / self.w, abs=0.2 * np.pi / self.w)

    def test_flat_profile_gives_small_gamma(self):
        pts = self.synth(0.0, 2.8 * np.pi / self.w, 0.01, seed=43)
        res = g2.fit_near_field(pts, self.w)
        assert abs(res.gamma) < 0.05

    def test_modulated_model_beats_uniform(self):
        """Residual comparison: gamma free vs the uniform profile."""
        pts = self.synth(-0.3, 2.8 * np.pi / self.w, 0.01, seed=44, n=12)
        full = g2.fit_near_field(pts, self.w)
        resid0 = pts[:, 1] - g2.g2_thermal_uniform(pts[:, 0])
        ss0 = float(np.sum(resid0**2))
        ss1 = full.residual_norm**2
        n = pts.shape[0]
        f_ratio = ((ss0 - ss1) / 2) / (ss1 / (n - 2))
        assert f_ratio > 10.0

    def test_weight_rescaling_invariance(self):
        pts = self.synth(-0.3, 2.8 * np.pi / self.w, 0.01, seed=45)
        a = g2.fit_near_field(pts, self.w, sigma=np.full(8, 1.0))
        b = g2.fit_near_field(pts, self.w, sigma=np.full(8, 7.0))
        assert a.gamma == pytest.approx(b.gamma, abs=1e-5)
        assert a.omega == pytest.approx(b.omega, rel=1e-5)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match="at least 4"):
            g2.fit_near_field([(0.1, 1.5), (0.5, 1.3), (1.0, 1.0)], self.w)

    def test_covariance_shape(self):
        pts = self.synth(-0.3, 2.8 * np.pi / self.w, 0.01, seed=46)
        res = g2.fit_near_field(pts, self.w)
        assert res.covariance.shape == (2, 2)
        assert np.all(np.isfinite(res.covariance))


class TestBeatFit:
    def test_clean_cosine(self):
        tau = np.arange(-200, 201) * 1e-10
        vals = 1.0 + 0.2 * np.cos(2 * np.pi * tau / 1.4e-9)
        fit = g2.fit_beat(tau, vals)
        assert fit.amplitude == pytest.approx(0.2, abs=1e-6)
        assert fit.period == pytest.approx(1.4e-9, rel=1e-6)

    def test_noisy_with_nan_guard(self):
        rng = np.random.default_rng(9)
        tau = np.arange(-200, 201) * 1e-10
        vals = 1.0 + 0.2 * np.cos(2 * np.pi * tau / 1.4e-9) + rng.normal(0, 0.02, tau.size)
        vals[5] = np.nan
        fit = g2.fit_beat(tau, vals, period_guess=1.4e-9)
        assert fit.amplitude == pytest.approx(0.2, abs=0.02)
        assert fit.period == pytest.approx(1.4e-9, rel=0.02)
