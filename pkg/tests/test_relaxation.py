"""Polarization, rate models, decay fitting, and instantaneous diffusion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endorlab import (
    DecayCurve,
    LineShape,
    RelaxParams,
    T1eParams,
    fit_exponential,
    fit_rate_model,
    id_flip_probability,
    id_line_fit,
    mims_fit,
    polarization,
    t1e_rate,
    t1n_rate,
)
from endorlab.constants import HF_OVER_KB_K_PER_GHZ
from endorlab.relaxation import t1e_terms

from oracles import riemann_flip_probability


class TestPolarization:
    def test_paper_value(self):
        assert polarization(0.100, 9.56) == pytest.approx(0.980, abs=0.001)

    def test_zeeman_temperature(self):
        assert HF_OVER_KB_K_PER_GHZ * 9.56 == pytest.approx(0.459, abs=0.002)

    def test_tanh_half(self):
        # h f / kB = 0.4588 K forces the argument to exactly one half
        assert polarization(0.45880763781381073, 9.56) == pytest.approx(
            np.tanh(0.5), abs=1e-9)

    def test_limits(self):
        assert polarization(1e9, 9.56) < 1e-6
        assert polarization(1e-4, 9.56) > 1 - 1e-12
        with pytest.raises(ValueError):
            polarization(0.0, 9.56)

    @given(st.floats(0.1, 100.0), st.floats(0.01, 30.0))
    @settings(max_examples=60, deadline=None)
    def test_monotonic_and_bounded(self, t, f):
        # ranges keep tanh away from float64 saturation
        p = polarization(t, f)
        assert 0.0 < p < 1.0
        assert polarization(t * 1.5, f) < p
        assert polarization(t, f * 1.5) > p


class TestT1eModel:
    def test_zero_temperature_floor(self):
        p = T1eParams(a_d=1 / 17.0, a_r=0.0, a_o=0.0, delta_o_K=50.0)
        assert t1e_rate(1e-3, p) == pytest.approx(1 / 17.0, rel=1e-6)

    def test_coth_ratio(self):
        p = T1eParams(a_d=0.3, f_r_GHz=9.56)
        x = HF_OVER_KB_K_PER_GHZ * 9.56 / 2
        for t in (0.1, 0.3, 1.0):
            expected = (1 / np.tanh(x / (2 * t))) / (1 / np.tanh(x / t))
            assert t1e_rate(2 * t, p) / t1e_rate(t, p) == pytest.approx(expected, rel=1e-12)

    def test_terms_sum(self):
        p = T1eParams(a_d=0.1, a_r=1e-4, a_o=1e5, delta_o_K=40.0)
        terms = t1e_terms(3.0, p)
        assert t1e_rate(3.0, p) == pytest.approx(sum(terms.values()), rel=1e-15)

    @given(st.floats(0.05, 6.0))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_temperature(self, t):
        p = T1eParams(a_d=0.1, a_r=1e-4, a_o=1e5, delta_o_K=40.0)
        assert t1e_rate(t * 1.2, p) > t1e_rate(t, p)


class TestT1nModel:
    PAPER = RelaxParams(sigma=0.126, gamma_d=7.3e-5, gamma_r=0.0, gamma_o=1e-32,
                        f_n_MHz=212.4, f_r_GHz=9.56)

    def test_paper_75mK(self):
        total, terms = t1n_rate(0.075, self.PAPER, 1 / 17.0)
        t1n = 1.0 / total
        assert 830 <= t1n <= 900  # frozen from the model evaluation
        assert t1n == pytest.approx(13.8 * 60, rel=0.25)
        assert terms["direct"] > 0.5 * total

    def test_terms_sum_exactly(self):
        total, terms = t1n_rate(0.4, self.PAPER, 0.5)
        assert total == sum(terms.values())

    def test_high_temperature_constant_ratio(self):
        # Pe -> 0: the electron-driven channel dominates, T1n/T1e -> 1/sigma
        rp = RelaxParams(sigma=0.126, gamma_d=0.0, gamma_r=0.0, gamma_o=0.0,
                         f_n_MHz=212.4, f_r_GHz=9.56)
        t1e = 1e-3
        total, _ = t1n_rate(50.0, rp, 1 / t1e)
        assert (1 / total) / t1e == pytest.approx(1 / 0.126, rel=1e-3)

    def test_all_zero(self):
        rp = RelaxParams()
        total, _ = t1n_rate(1.0, rp, 5.0)
        assert total == 0.0

    def test_monotone_in_temperature(self):
        p_e = T1eParams(a_d=1 / 17, a_r=5e-4, a_o=1e6, delta_o_K=40.0)
        temps = np.linspace(0.05, 6.0, 60)
        total, _ = t1n_rate(temps, self.PAPER, t1e_rate(temps, p_e))
        assert np.all(np.diff(total) > 0)


class TestRateModelFit:
    def test_zero_noise_round_trip(self):
        p_true = T1eParams(a_d=1 / 17, a_r=5e-4, a_o=1e10, delta_o_K=100.0)
        temps = np.logspace(np.log10(2.0), np.log10(6.5), 30)
        fit = fit_rate_model(temps, t1e_rate(temps, p_true), "t1e",
                             fixed={"f_r_GHz": 9.56})
        assert fit.converged
        for name in ("a_d", "a_r", "a_o", "delta_o_K"):
            assert getattr(fit.params, name) == pytest.approx(
                getattr(p_true, name), rel=0.10)

    def test_noisy_round_trip(self):
        p_true = T1eParams(a_d=1 / 17, a_r=0.0, a_o=1e6, delta_o_K=40.0)
        temps = np.logspace(np.log10(0.8), np.log10(6.5), 60)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            rates = t1e_rate(temps, p_true) * np.exp(0.1 * rng.normal(size=len(temps)))
            fit = fit_rate_model(temps, rates, "t1e",
                                 fixed={"f_r_GHz": 9.56, "a_r": 0.0})
            for name in ("a_d", "a_o", "delta_o_K"):
                assert getattr(fit.params, name) == pytest.approx(
                    getattr(p_true, name), rel=0.20), f"seed {seed}, {name}"

    def test_extrapolation_to_100mK(self):
        p_true = T1eParams(a_d=1 / 17, a_r=5e-4, a_o=1e6, delta_o_K=40.0)
        temps = np.logspace(np.log10(2.0), np.log10(6.5), 40)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            rates = t1e_rate(temps, p_true) * np.exp(0.05 * rng.normal(size=len(temps)))
            fit = fit_rate_model(temps, rates, "t1e", fixed={"f_r_GHz": 9.56})
            assert fit.rate(0.1) == pytest.approx(t1e_rate(0.1, p_true), rel=0.15)

    def test_single_process_pins_others_at_zero(self):
        p_true = T1eParams(a_d=0.25)
        temps = np.linspace(0.1, 2.0, 24)
        fit = fit_rate_model(temps, t1e_rate(temps, p_true), "t1e",
                             fixed={"f_r_GHz": 9.56})
        assert fit.params.a_d == pytest.approx(0.25, rel=1e-4)
        assert fit.params.a_r * 2.0 ** 9 < 1e-4 * 0.25
        assert fit.params.a_o * np.exp(-fit.params.delta_o_K / 2.0) < 1e-3 * 0.25

    def test_t1n_fit_recovers_sigma(self):
        p_e = T1eParams(a_d=1 / 17, a_r=5e-4, a_o=1e6, delta_o_K=40.0)
        rp = RelaxParams(sigma=0.126, gamma_d=7.3e-5, gamma_r=0.0, gamma_o=1e-32)
        temps = np.logspace(np.log10(0.06), np.log10(6.0), 40)
        total, _ = t1n_rate(temps, rp, t1e_rate(temps, p_e))
        fit = fit_rate_model(temps, total, "t1n",
                             fixed={"f_n_MHz": 212.4, "f_r_GHz": 9.56, "gamma_r": 0.0},
                             t1e_of_T=lambda t: t1e_rate(t, p_e))
        assert fit.params.sigma == pytest.approx(0.126, rel=0.05)
        assert fit.params.gamma_d == pytest.approx(7.3e-5, rel=0.05)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            fit_rate_model([1.0, 2.0], [0.1, -0.2], "t1e")
        with pytest.raises(ValueError):
            fit_rate_model([1.0, 2.0], [0.1, 0.2], "bogus")
        with pytest.raises(ValueError):
            fit_rate_model([1.0, 2.0], [0.1, 0.2], "t1n")  # missing t1e_of_T


class TestExponentialFit:
    def test_exact_recovery(self):
        t = np.linspace(0.0, 10.0, 40)
        y = 3.0 * np.exp(-t / 2.5) + 0.5
        fit = fit_exponential(DecayCurve(t, y))
        assert fit.amplitude == pytest.approx(3.0, rel=1e-8)
        assert fit.tau_s == pytest.approx(2.5, rel=1e-8)
        assert fit.offset == pytest.approx(0.5, abs=1e-8)

    def test_inversion_recovery_form(self):
        t = np.linspace(0.0, 8.0, 50)
        y = 2.0 * (1 - 2 * np.exp(-t / 1.5)) + 0.1
        fit = fit_exponential(DecayCurve(t, y), kind="inversion_recovery")
        assert fit.tau_s == pytest.approx(1.5, rel=1e-8)
        assert fit.amplitude == pytest.approx(2.0, rel=1e-8)

    def test_biexponential_raises_chi2(self):
        rng = np.random.default_rng(0)
        t = np.linspace(0.0, 10.0, 60)
        sigma = 0.01
        y_bi = 2.0 * np.exp(-t / 0.5) + 2.0 * np.exp(-t / 5.0) + sigma * rng.normal(size=60)
        y_single = 4.0 * np.exp(-t / 2.0) + sigma * rng.normal(size=60)
        chi_bi = fit_exponential(DecayCurve(t, y_bi), noise_sigma=sigma).reduced_chi2
        chi_single = fit_exponential(DecayCurve(t, y_single), noise_sigma=sigma).reduced_chi2
        assert chi_single < 3.0
        assert chi_bi > 10 * chi_single

    def test_constant_data(self):
        t = np.linspace(0.0, 5.0, 20)
        fit = fit_exponential(DecayCurve(t, np.full(20, 2.0)))
        assert abs(fit.amplitude) < 1e-6 or fit.rate_per_s < 1e-6

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_exponential(DecayCurve([0.0, 1.0, 2.0, 3.0], [1.0, 0.5, 0.3, 0.2]))


class TestMimsFit:
    @pytest.mark.parametrize("t2,m", [(2.18e-3, 1.42), (43e-3, 1.65)])
    def test_noisy_round_trip_ten_seeds(self, t2, m):
        tt = np.geomspace(0.05 * t2, 2.2 * t2, 30)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            y = np.exp(-((tt / t2) ** m)) * (1 + 0.03 * rng.normal(size=30))
            fit = mims_fit(DecayCurve(tt, y))
            assert fit.t2_s == pytest.approx(t2, rel=0.05), f"seed {seed}"
            assert fit.m == pytest.approx(m, abs=0.10), f"seed {seed}"

    def test_pure_exponential_limit(self):
        tt = np.geomspace(0.05, 5.0, 40)
        y = 2.0 * np.exp(-tt / 1.3)
        fit = mims_fit(DecayCurve(tt, y))
        assert fit.m == pytest.approx(1.0, abs=1e-6)
        assert fit.t2_s == pytest.approx(1.3, rel=1e-6)
        # amplitude at 2 tau = T2 equals E0 / e
        assert fit.e0 * np.exp(-1.0) == pytest.approx(
            2.0 * np.exp(-1.3 / 1.3), rel=1e-6)

    def test_scale_equivariance(self):
        tt = np.geomspace(1e-4, 6e-3, 25)
        rng = np.random.default_rng(3)
        y = np.exp(-((tt / 2e-3) ** 1.4)) * (1 + 0.02 * rng.normal(size=25))
        f1 = mims_fit(DecayCurve(tt, y))
        f2 = mims_fit(DecayCurve(tt, 100.0 * y))
        assert f2.e0 == pytest.approx(100.0 * f1.e0, rel=1e-8)
        assert f2.t2_s == pytest.approx(f1.t2_s, rel=1e-8)
        assert f2.m == pytest.approx(f1.m, rel=1e-8)

    def test_rejects_few_positive_samples(self):
        tt = np.linspace(1.0, 10.0, 8)
        y = np.array([1.0, 0.5, -0.1, -0.2, -0.1, -0.3, -0.2, -0.1])
        with pytest.raises(ValueError):
            mims_fit(DecayCurve(tt, y))


class TestFlipProbability:
    def test_delta_pi_pulse(self):
        # omega_1 t_p = pi <=> f1 t_p = 1/2
        assert id_flip_probability(0.5e-6, 1e6) == pytest.approx(1.0, abs=1e-12)

    def test_delta_zero_length(self):
        with pytest.raises(ValueError):
            id_flip_probability(0.0, 1e6)
        assert id_flip_probability(1e-12, 1e6) < 1e-10

    def test_delta_closed_form(self):
        for tp in (13e-9, 137e-9, 0.93e-6):
            expected = np.sin(np.pi * 1.7e6 * tp) ** 2
            assert id_flip_probability(tp, 1.7e6) == pytest.approx(expected, abs=1e-9)

    def test_broad_line_vs_riemann_oracle(self):
        line = LineShape("gaussian", width_Hz=25e6)
        v = id_flip_probability(0.5e-6, 1e6, line)
        oracle = riemann_flip_probability(0.5e-6, 1e6, line.density, 8 * 25e6)
        assert v == pytest.approx(oracle, rel=1e-5)
        assert v < 0.2  # broad line suppresses the nominal pi pulse

    def test_lorentzian_vs_riemann_oracle(self):
        line = LineShape("lorentzian", width_Hz=5e6)
        v = id_flip_probability(0.2e-6, 2e6, line)
        oracle = riemann_flip_probability(0.2e-6, 2e6, line.density, 8 * 5e6)
        assert v == pytest.approx(oracle, rel=1e-5)

    @given(st.floats(1e-8, 3e-6), st.floats(1e5, 5e6))
    @settings(max_examples=30, deadline=None)
    def test_range(self, tp, f1):
        assert 0.0 <= id_flip_probability(tp, f1, LineShape("gaussian", 10e6)) <= 1.0


class TestIdLineFit:
    def test_exact_line(self):
        x = np.array([0.1, 0.3, 0.5, 0.8])
        y = 100.0 + 250.0 * x
        intercept, slope, r2 = id_line_fit(x, y)
        assert intercept == pytest.approx(100.0, rel=1e-12)
        assert slope == pytest.approx(250.0, rel=1e-12)
        assert r2 == pytest.approx(1.0, abs=1e-12)

    def test_extrapolated_id_rate(self):
        # construct points so the flip probability of a 200 ns pulse maps to
        # an ID-limited rate of 1/5.1 ms
        f1 = 2.5e6
        p200 = id_flip_probability(200e-9, f1)
        slope = (1 / 5.1e-3) / p200
        probs = np.array([id_flip_probability(tp, f1) for tp in
                          (40e-9, 80e-9, 120e-9, 160e-9)])
        rates = 50.0 + slope * probs
        intercept, slope_fit, r2 = id_line_fit(probs, rates)
        t2e_id = 1.0 / (slope_fit * p200)
        assert t2e_id == pytest.approx(5.1e-3, rel=0.02)
        assert r2 > 0.999

    def test_zero_slope(self):
        x = np.array([0.1, 0.4, 0.7])
        y = np.array([120.0, 120.0, 120.0])
        intercept, slope, _ = id_line_fit(x, y)
        assert slope == pytest.approx(0.0, abs=1e-10)
        assert intercept == pytest.approx(120.0)

    def test_degenerate_abscissae(self):
        with pytest.raises(ValueError):
            id_line_fit([0.3, 0.3, 0.3], [1.0, 2.0, 3.0])
