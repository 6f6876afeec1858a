"""
Tests for the relaxed stage designs and the communication-stage maximizer
"""
import math
from dataclasses import replace

import numpy as np
import pytest

from errors import DegenerateDirectionError, ExtractionInvalidError, InfeasibleError, SolverFailure, ValidationError
from metrics import (
    EstimatorPrior,
    lmmse_error,
    lmmse_optimal_covariance,
    ls_error,
    ls_optimal_covariance,
    sinr_ap_grid,
    sinr_ue,
    ue_denominator,
)
from models import ScaSettings, db_to_linear
from schemes import (
    SdrSolution,
    build_ue_sinr_constraint,
    detection_only_beamformer,
    detection_stage_design,
    extract_rank_one,
    lmmse_stage_design,
    ls_stage_design,
    optimal_y,
    probing_only_beamformer,
    qt_objective,
    recover_beamformer,
    solve_comm_enhancement,
    solve_detection,
    ue_only_sinr,
    verify_extraction,
)
from schemes.sca import _delta, ap_power_requirement, meets_thresholds, mrt_initializer
from schemes.sdr import detection_q_max
from signal_model import Beamformer

THETA_I = math.radians(90.0)
THETA_MAX = math.radians(45.0)


class TestUeSinrConstraint:
    def test_matches_sinr_margin(self, cfg, channels, rng):
        w = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        bf = Beamformer.from_matrix(w * 1e-2)
        gamma = 3.0
        ue = build_ue_sinr_constraint(gamma, channels, cfg)
        w_u = np.outer(bf.w_u, bf.w_u.conj())
        signal = abs(complex(channels.h_u @ bf.w_u)) ** 2
        expected = signal - gamma * ue_denominator(bf, channels, cfg)
        assert ue.evaluate(bf.covariance, w_u) == pytest.approx(expected, rel=1e-9)

    def test_rejects_negative_threshold(self, cfg, channels):
        with pytest.raises(ValidationError):
            build_ue_sinr_constraint(-1.0, channels, cfg)


class TestDetectionStage:
    def test_unconstrained_reaches_full_gain(self, cfg, channels):
        design = detection_stage_design(THETA_I, 0.0, channels, cfg)
        assert design.relaxed.q == pytest.approx(detection_q_max(cfg), rel=1e-5)

    def test_design_meets_constraints(self, cfg, channels):
        gamma = db_to_linear(15.0)
        design = detection_stage_design(THETA_I, gamma, channels, cfg)
        bf = design.beamformer

        assert design.check.passed
        assert bf.within_budget(cfg)
        assert sinr_ue(bf, design.channels, cfg).value >= gamma * (1 - 1e-5)
        assert sinr_ap_grid(bf, THETA_I, cfg).value == pytest.approx(design.relaxed.q, rel=1e-5)
        assert np.allclose(bf.covariance, design.relaxed.r_w, atol=1e-7 * design.relaxed.scale)

        gain = complex(channels.h_u @ bf.w_u)
        assert gain.real >= 0 and abs(gain.imag) <= 1e-9 * max(abs(gain), 1.0)
        second = np.linalg.eigvalsh(design.extracted.w_u_mat)[-2]
        assert second <= 1e-9 * design.relaxed.scale

    def test_q_falls_as_threshold_rises(self, cfg, channels):
        low = solve_detection(THETA_I, db_to_linear(5.0), channels, cfg)
        high = solve_detection(THETA_I, db_to_linear(25.0), channels, cfg)
        assert high.q <= low.q * (1 + 1e-6)

    def test_unreachable_threshold(self, cfg, channels):
        with pytest.raises((InfeasibleError, SolverFailure)):
            detection_stage_design(THETA_I, db_to_linear(100.0), channels, cfg)


class TestEstimationStages:
    def test_ls_without_ue_matches_isotropic(self, cfg, channels):
        design = ls_stage_design(THETA_MAX, 0.0, channels, cfg)
        expected = ls_error(ls_optimal_covariance(cfg), channels.h_b, cfg)
        assert design.objective == pytest.approx(expected, rel=1e-4)

    def test_ls_design(self, cfg, channels):
        design = ls_stage_design(THETA_MAX, db_to_linear(15.0), channels, cfg)
        bf = design.beamformer
        recovered = ls_error(bf.covariance, channels.h_b, cfg)
        assert design.objective == pytest.approx(recovered, rel=1e-4)
        assert design.objective >= ls_error(ls_optimal_covariance(cfg), channels.h_b, cfg) * (1 - 1e-6)
        assert design.check.passed
        assert design.residuals.passes(1e-6)

    def test_estimation_split_puts_covariance_on_ue_beam(self, cfg, channels):
        design = ls_stage_design(THETA_MAX, db_to_linear(15.0), channels, cfg)
        assert np.allclose(design.relaxed.w_u_mat, design.relaxed.r_w)
        assert np.allclose(design.relaxed.w_t_mat, 0.0)
        bf = design.beamformer
        assert np.allclose(bf.w_t, 0.0)
        rest = bf.covariance - np.outer(bf.w_u, bf.w_u.conj())
        h_u = channels.h_u
        leaked = float(np.real(h_u @ rest @ h_u.conj()))
        assert leaked <= 1e-9 * float(np.real(h_u @ bf.covariance @ h_u.conj()))

    def test_lmmse_without_ue_matches_water_filling(self, cfg, channels, prior):
        design = lmmse_stage_design(prior, THETA_MAX, 0.0, channels, cfg)
        optimum = lmmse_error(lmmse_optimal_covariance(prior, channels.h_b, cfg), prior, channels.h_b, cfg)
        assert design.objective == pytest.approx(optimum, rel=1e-4)

    def test_lmmse_design(self, cfg, channels, prior):
        design = lmmse_stage_design(prior, THETA_MAX, db_to_linear(15.0), channels, cfg)
        recovered = lmmse_error(design.beamformer.covariance, prior, channels.h_b, cfg)
        assert design.objective == pytest.approx(recovered, rel=1e-4)
        assert design.beamformer.within_budget(cfg)

    def test_lmmse_prior_size_checked(self, cfg, channels):
        with pytest.raises(ValidationError):
            lmmse_stage_design(EstimatorPrior.exponential(3, 0.5), THETA_MAX, 1.0, channels, cfg)


class TestFullScaleEstimation:
    """Estimation stages at a 1 mW budget with -40 dBm noise"""

    @pytest.mark.parametrize("n", [4, pytest.param(16, marks=pytest.mark.slow)])
    def test_ls_stage(self, full_scale, n):
        cfg, channels = full_scale(n)
        isotropic = ls_error(ls_optimal_covariance(cfg), channels.h_b, cfg)

        loose = ls_stage_design(THETA_MAX, 1.0, channels, cfg)
        assert loose.report.optimal
        assert loose.objective == pytest.approx(isotropic, rel=1e-4)

        design = ls_stage_design(THETA_MAX, db_to_linear(18.0), channels, cfg)
        assert design.check.passed
        assert design.objective == pytest.approx(ls_error(design.beamformer.covariance, channels.h_b, cfg), rel=1e-4)
        assert design.objective >= isotropic * (1 - 1e-6)
        assert sinr_ue(design.beamformer, design.channels, cfg).value >= db_to_linear(18.0) * (1 - 1e-5)

    @pytest.mark.parametrize("n", [4, pytest.param(16, marks=pytest.mark.slow)])
    def test_lmmse_stage(self, full_scale, n):
        cfg, channels = full_scale(n)
        prior = EstimatorPrior.exponential(n, 0.9)
        for gamma in (1.0, db_to_linear(18.0)):
            design = lmmse_stage_design(prior, THETA_MAX, gamma, channels, cfg)
            assert design.check.passed
            recovered = lmmse_error(design.beamformer.covariance, prior, channels.h_b, cfg)
            assert design.objective == pytest.approx(recovered, rel=1e-4)
            assert design.beamformer.within_budget(cfg)


class TestExtraction:
    def _solution(self, w_u_mat: np.ndarray, n: int = 4) -> SdrSolution:
        return SdrSolution(
            stage="ls",
            r_w=np.eye(n, dtype=complex),
            w_u_mat=w_u_mat,
            w_t_mat=np.zeros((n, n), dtype=complex),
            objective=0.0,
            theta=THETA_MAX,
            gamma_uth=0.0,
        )

    def test_zero_beam_extracts_to_zero(self, channels):
        extracted = extract_rank_one(self._solution(np.zeros((4, 4), dtype=complex)), channels)
        assert np.allclose(extracted.w_u_mat, 0.0)
        assert extracted.extracted

    def test_zero_tag_beam_recovers_zero_column(self, channels):
        extracted = extract_rank_one(self._solution(np.zeros((4, 4), dtype=complex)), channels)
        bf = recover_beamformer(extracted, channels)
        assert np.allclose(bf.w_t, 0.0)
        assert np.allclose(bf.w_u, 0.0)
        assert np.allclose(bf.covariance, np.eye(4))

    def test_beam_orthogonal_to_channel_is_degenerate(self, channels):
        h = channels.h_u
        e = np.zeros(4, dtype=complex)
        e[0] = 1.0
        v = e - h.conj() * (h @ e) / np.vdot(h, h).real
        with pytest.raises(DegenerateDirectionError):
            extract_rank_one(self._solution(0.5 * np.outer(v, v.conj())), channels)

    def test_dominance_violation_is_reported(self, cfg, channels):
        design = ls_stage_design(THETA_MAX, db_to_linear(15.0), channels, cfg)
        scale = design.relaxed.scale
        bumped = design.extracted.w_t_mat + 2.0 * scale * np.diag([1.0, 0.0, 0.0, 0.0])
        broken = replace(design.extracted, w_t_mat=bumped)
        with pytest.raises(ExtractionInvalidError) as exc:
            verify_extraction(design.relaxed, broken, design.channels, cfg)
        assert exc.value.clause == "dominance"

    def test_recover_needs_extracted_solution(self, channels):
        with pytest.raises(ValidationError):
            recover_beamformer(self._solution(np.zeros((4, 4), dtype=complex)), channels)


class TestBaselines:
    def test_detection_only_uses_budget(self, cfg):
        bf = detection_only_beamformer(THETA_I, cfg)
        assert bf.power == pytest.approx(cfg.power_budget)
        assert sinr_ap_grid(bf, THETA_I, cfg).value == pytest.approx(detection_q_max(cfg))

    def test_probing_only_realizes_covariance(self, cfg):
        r = ls_optimal_covariance(cfg)
        assert np.allclose(probing_only_beamformer(r).covariance, r)


class TestCommunicationStage:
    GAMMA_T = db_to_linear(15.0)
    GAMMA_AP = db_to_linear(12.0)

    def test_quadratic_transform_at_optimal_y(self, cfg, channels, rng):
        w = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        bf = Beamformer.from_matrix(w * 0.1).rotated(channels.h_u, channels.h_f)
        y = optimal_y(bf, channels, cfg)
        assert qt_objective(bf, y, channels, cfg) == pytest.approx(sinr_ue(bf, channels, cfg).value, rel=1e-9)
        assert qt_objective(bf, 1.1 * y, channels, cfg) < qt_objective(bf, y, channels, cfg)

    def test_mrt_start_is_feasible(self, cfg, channels):
        bf = mrt_initializer(self.GAMMA_T, self.GAMMA_AP, channels, cfg)
        assert meets_thresholds(bf, self.GAMMA_T, self.GAMMA_AP, channels, cfg)

    def test_rate_maximizer(self, cfg, channels):
        bf, state = solve_comm_enhancement(self.GAMMA_T, self.GAMMA_AP, channels, cfg)
        assert meets_thresholds(bf, self.GAMMA_T, self.GAMMA_AP, channels, cfg, rtol=1e-5)

        trace = state.objective_trace
        assert len(trace) == state.iteration + 1
        for before, after in zip(trace, trace[1:]):
            assert after >= before * (1 - 1e-5)
        assert sinr_ue(bf, channels, cfg).value == pytest.approx(trace[-1], rel=1e-6)
        assert trace[-1] <= ue_only_sinr(channels, cfg) * (1 + 1e-6)
        assert state.converged or state.iteration == ScaSettings().k_max
        assert state.initializer in ("relaxed", "mrt")

    def test_single_inner_step_without_ap_constraint(self, cfg, channels):
        _, state = solve_comm_enhancement(self.GAMMA_T, 0.0, channels, cfg, settings=ScaSettings(k_max=5))
        assert all(len(values) <= 1 for values in state.inner_objectives)

    def test_outer_stop_is_absolute(self, cfg, channels):
        settings = ScaSettings()
        _, state = solve_comm_enhancement(self.GAMMA_T, self.GAMMA_AP, channels, cfg, settings=settings)
        if state.converged:
            assert abs(state.y_trace[-1] - state.y_trace[-2]) < settings.eps_th
        for before, after in zip(state.y_trace[1:-1], state.y_trace[2:-1]):
            assert abs(after - before) >= settings.eps_th

    def test_relative_stop_setting(self, cfg, channels):
        settings = ScaSettings(convergence="relative", eps_th=1e-3)
        _, state = solve_comm_enhancement(self.GAMMA_T, self.GAMMA_AP, channels, cfg, settings=settings)
        assert state.converged
        last, previous = state.y_trace[-1], state.y_trace[-2]
        assert abs(last - previous) / abs(last) < settings.eps_th

    def test_gradient_term(self, channels):
        h_f = channels.h_f
        anchor = Beamformer(h_f.conj() * 0.1, h_f.conj() * 0.2, np.zeros((4, 4), complex))
        moved = Beamformer(h_f.conj() * 0.1, h_f.conj() * 0.3, np.zeros((4, 4), complex))
        gain = float(np.real(np.vdot(h_f, h_f)))
        # h_f W = gain·[0.1, 0.3], h_f (W − W‡) = gain·[0, 0.1]
        term = 2.0 * 0.03 * gain ** 2
        assert _delta(moved, anchor, h_f) == pytest.approx(term)
        assert _delta(moved, anchor, h_f, relative=True) == pytest.approx(term / (0.1 * gain ** 2))
        assert _delta(anchor, anchor, h_f) == 0.0

    def test_ap_requirement_out_of_reach(self, noisy_cfg, channels):
        assert ap_power_requirement(self.GAMMA_AP, channels, noisy_cfg) > noisy_cfg.power_budget * 2.56
        with pytest.raises(InfeasibleError):
            solve_comm_enhancement(self.GAMMA_T, self.GAMMA_AP, channels, noisy_cfg)

    def test_rejects_negative_thresholds(self, cfg, channels):
        with pytest.raises(ValidationError):
            solve_comm_enhancement(-1.0, 0.0, channels, cfg)
