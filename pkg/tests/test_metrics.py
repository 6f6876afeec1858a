"""
Tests for beampatterns, SINRs, detection probability and estimation errors
"""
import math

import numpy as np
import pytest

from errors import NotPsdError, ValidationError
from linalg import erfc_inv
from metrics import (
    EstimatorPrior,
    beampattern,
    cfar_threshold,
    detection_pattern,
    detection_probability,
    estimation_gain,
    lmmse_error,
    lmmse_optimal_covariance,
    ls_error,
    ls_error_exact,
    ls_optimal_covariance,
    rate_ue,
    signal_beampatterns,
    sinr_ap,
    sinr_ap_grid,
    sinr_tag,
    sinr_ue,
    surrogate_channels,
    waterfilling_waveform,
)
from signal_model import Beamformer, ChannelSet, equal_gain_combiner, sample_covariance, steering_tx


def mrt(h: np.ndarray, power: float) -> np.ndarray:
    return math.sqrt(power) * h.conj() / np.linalg.norm(h)


class TestBeampattern:
    def test_isotropic_covariance_is_flat(self, cfg):
        pattern = beampattern(ls_optimal_covariance(cfg), np.linspace(0, math.pi, 7))
        assert np.allclose(pattern, cfg.power_budget)

    def test_mrt_peaks_at_target(self, cfg):
        w = mrt(steering_tx(math.radians(30), cfg.n_tx), 1.0)
        bf = Beamformer(np.zeros(4), w, np.zeros((4, 4)))
        grid = np.radians(np.arange(0.0, 180.5, 0.5))
        patterns = signal_beampatterns(bf, grid)
        assert grid[np.argmax(patterns["overall"])] == pytest.approx(math.radians(30))
        assert np.allclose(patterns["communication"], 0.0)
        assert np.allclose(patterns["tag"], patterns["overall"])
        assert np.max(patterns["overall"]) == pytest.approx(cfg.n_tx)

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(NotPsdError):
            beampattern(np.diag([1.0, -1.0]), [0.0])


class TestSinr:
    def test_tag_sinr(self, cfg, channels):
        w_t = mrt(channels.h_f, 1.0)
        bf = Beamformer(np.zeros(4), w_t, np.zeros((4, 4)))
        expected = np.linalg.norm(channels.h_f) ** 2 / cfg.noise_tag
        assert sinr_tag(bf, channels.h_f, cfg.noise_tag).value == pytest.approx(expected)

    def test_grid_matches_surrogate_channels(self, cfg, rng):
        root = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        r = root @ root.conj().T
        theta = math.radians(70.0)
        sur = surrogate_channels(theta, cfg)
        w_r = equal_gain_combiner(sur.h_b)
        assert sinr_ap_grid(r, theta, cfg).value == pytest.approx(sinr_ap(r, sur.h_f, sur.h_b, w_r, cfg).value)

    def test_ue_sinr_without_interference(self, cfg, channels):
        quiet = ChannelSet(channels.h_f, channels.h_b, channels.h_u, h_tu=0.0)
        w_u = mrt(channels.h_u, 1.0)
        bf = Beamformer(w_u, np.zeros(4), np.zeros((4, 4)))
        expected = np.linalg.norm(channels.h_u) ** 2 / cfg.noise_ue
        assert sinr_ue(bf, quiet, cfg).value == pytest.approx(expected)
        assert rate_ue(bf, quiet, cfg) == pytest.approx(math.log2(1 + expected))

    def test_rescatter_lowers_ue_sinr(self, cfg, channels):
        bf = Beamformer(mrt(channels.h_u, 0.5), mrt(channels.h_f, 0.5), np.zeros((4, 4)))
        quiet = ChannelSet(channels.h_f, channels.h_b, channels.h_u, h_tu=0.0)
        assert sinr_ue(bf, channels, cfg).value < sinr_ue(bf, quiet, cfg).value


class TestDetection:
    def test_zero_sinr_gives_false_alarm_rate(self):
        assert detection_probability(0.0, 1e-4) == pytest.approx(1e-4, rel=1e-9)

    def test_monotone_in_sinr(self):
        values = [detection_probability(g, 1e-3) for g in (0.1, 1.0, 5.0, 20.0)]
        assert values == sorted(values)
        assert detection_probability(math.inf, 1e-3) == 1.0

    def test_half_at_threshold_sinr(self):
        pfa = 1e-2
        gamma = float(erfc_inv(2 * pfa)) ** 2
        assert detection_probability(gamma, pfa) == pytest.approx(0.5)

    @pytest.mark.parametrize("gamma, pfa", [(-1.0, 1e-3), (1.0, 0.0), (1.0, 1.0)])
    def test_rejects_bad_arguments(self, gamma, pfa):
        with pytest.raises(ValidationError):
            detection_probability(gamma, pfa)

    def test_pattern_shape(self, cfg):
        pd = detection_pattern(ls_optimal_covariance(cfg), np.radians([10.0, 50.0, 90.0]), cfg)
        assert pd.shape == (3,)
        assert np.allclose(pd, pd[0])

    def test_cfar_threshold_scales_with_sqrt_samples(self, cfg):
        theta = math.radians(40.0)
        sur = surrogate_channels(theta, cfg)
        w_r = equal_gain_combiner(sur.h_b)
        r = ls_optimal_covariance(cfg)
        one = cfar_threshold(r, sur, w_r, cfg, n_samples=1)
        four = cfar_threshold(r, sur, w_r, cfg, n_samples=4)
        assert four == pytest.approx(2 * one)


class TestEstimation:
    def test_gain_formula(self, cfg, channels):
        hb2 = np.linalg.norm(channels.h_b) ** 2
        expected = cfg.alpha * cfg.sig_len / (cfg.n_rx * (cfg.noise_ap + cfg.alpha * hb2 * cfg.noise_tag))
        assert estimation_gain(channels.h_b, cfg) == pytest.approx(expected)

    def test_ls_isotropic_value(self, cfg, channels):
        c = estimation_gain(channels.h_b, cfg)
        expected = cfg.n_tx ** 2 / (cfg.power_budget * c)
        assert ls_error(ls_optimal_covariance(cfg), channels.h_b, cfg) == pytest.approx(expected)

    def test_ls_isotropic_beats_unequal_split(self, cfg, channels):
        unequal = np.diag([0.4, 0.3, 0.2, 0.1]).astype(complex)
        assert ls_error(ls_optimal_covariance(cfg), channels.h_b, cfg) < ls_error(unequal, channels.h_b, cfg)

    def test_ls_singular_is_infinite(self, cfg, channels):
        assert ls_error(np.diag([1.0, 0.0, 0.0, 0.0]), channels.h_b, cfg) == math.inf
        assert ls_error(ls_optimal_covariance(cfg), channels.h_b, cfg.updated(alpha=0.0)) == math.inf

    def test_exact_ls_without_tag_noise_matches_closed_form(self, cfg, channels, rng):
        x = rng.standard_normal((4, cfg.sig_len)) + 1j * rng.standard_normal((4, cfg.sig_len))
        closed = ls_error(sample_covariance(x), channels.h_b, cfg, tag_noise=False)
        assert ls_error_exact(x, channels.h_b, cfg, tag_noise=False) == pytest.approx(closed, rel=1e-9)
        assert ls_error_exact(x, channels.h_b, cfg) <= ls_error(sample_covariance(x), channels.h_b, cfg)

    def test_lmmse_below_prior_trace(self, cfg, channels, prior):
        error = lmmse_error(ls_optimal_covariance(cfg), prior, channels.h_b, cfg)
        assert 0 < error < float(np.trace(prior.r_g).real)

    def test_water_filling_uses_budget_and_wins(self, noisy_cfg, channels, prior):
        r = lmmse_optimal_covariance(prior, channels.h_b, noisy_cfg)
        assert float(np.trace(r).real) == pytest.approx(noisy_cfg.power_budget)
        assert np.linalg.eigvalsh(r).min() >= -1e-12
        optimum = lmmse_error(r, prior, channels.h_b, noisy_cfg)
        assert optimum <= lmmse_error(ls_optimal_covariance(noisy_cfg), prior, channels.h_b, noisy_cfg)

    def test_water_filling_waveform(self, noisy_cfg, channels, prior):
        x = waterfilling_waveform(prior, channels.h_b, noisy_cfg)
        expected = lmmse_optimal_covariance(prior, channels.h_b, noisy_cfg)
        assert np.allclose(sample_covariance(x), expected, atol=1e-10)

    def test_prior_must_be_positive_definite(self):
        with pytest.raises(ValidationError):
            EstimatorPrior(np.diag([1.0, 0.0]))

    def test_exponential_prior(self):
        prior = EstimatorPrior.exponential(3, 0.5)
        assert prior.r_g[0, 2] == pytest.approx(0.25)
        assert np.allclose(prior.inverse @ prior.r_g, np.eye(3))
