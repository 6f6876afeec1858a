"""
Reference behavior of the stage designs: optimality against direct search,
monotone trade-offs along the preset sweeps, convergence of the
communication stage and the shape of the preset beampatterns
"""
import math

import numpy as np
import pytest
from scipy.optimize import minimize

import presets
import runner
from metrics import (
    EstimatorPrior,
    lmmse_error,
    ls_error,
    ls_optimal_covariance,
    signal_beampatterns,
    sinr_ap_grid,
    sinr_ue,
)
from models import Scenario, db_to_linear
from schemes import (
    detection_stage_design,
    lmmse_stage_design,
    ls_stage_design,
    probing_only_beamformer,
    solve_detection,
)
from schemes.sdr import detection_q_max
from signal_model import Beamformer, ChannelSet
from simkit import run_h0_trials, run_lmmse_trials

THETA_I = math.radians(90.0)
THETA_MAX = math.radians(45.0)
FINE_GRID = np.radians(np.arange(0.0, 180.0 + 1e-9, 0.1))


def random_channels(n: int, rng: np.random.Generator) -> ChannelSet:
    def draw() -> np.ndarray:
        return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2.0)
    return ChannelSet(draw(), draw(), draw(), 0.5, 0.5)


def rank_ratio(mat: np.ndarray) -> float:
    values = np.linalg.eigvalsh(mat)
    return float(values[-2] / values[-1])


def local_maxima(pattern: np.ndarray) -> np.ndarray:
    inner = (pattern[1:-1] >= pattern[:-2]) & (pattern[1:-1] >= pattern[2:])
    return np.degrees(FINE_GRID[1:-1][inner])


class TestRankOneExtraction:
    @pytest.mark.parametrize("n", [2, 4, 8, pytest.param(16, marks=pytest.mark.slow)])
    def test_detection_extraction_is_rank_one(self, cfg, rng, n):
        system = cfg.updated(n_tx=n, n_rx=n)
        for _ in range(3):
            ch = random_channels(n, rng)
            gamma = db_to_linear(10.0)
            design = detection_stage_design(THETA_I, gamma, ch, system)
            assert design.check.passed
            assert rank_ratio(design.extracted.w_u_mat) <= 1e-6
            if np.trace(design.extracted.w_t_mat).real > 0.0:
                assert rank_ratio(design.extracted.w_t_mat) <= 1e-6
            assert np.allclose(design.extracted.r_w, design.relaxed.r_w)
            assert sinr_ue(design.beamformer, design.channels, system).value >= gamma * (1 - 1e-5)


class TestTwoAntennaSearch:
    """Direct search over two-column beamformers bounds the relaxed optimum from below"""

    GAMMA = db_to_linear(10.0)

    @staticmethod
    def _beamformer(params: np.ndarray, share: float, power: float) -> Beamformer:
        phi_u, psi_u, phi_t, psi_t = params[:4]
        u = np.array([math.cos(phi_u), math.sin(phi_u) * np.exp(1j * psi_u)])
        t = np.array([math.cos(phi_t), math.sin(phi_t) * np.exp(1j * psi_t)])
        return Beamformer(math.sqrt(share * power) * u, math.sqrt((1.0 - share) * power) * t,
                          np.zeros((2, 1), dtype=complex))

    def _repaired(self, params, sur, system):
        """Smallest UE share at or above the proposed one that meets the threshold"""
        power = system.power_budget
        share = math.sin(params[4]) ** 2

        def feasible(s: float) -> bool:
            return sinr_ue(self._beamformer(params, s, power), sur, system).value >= self.GAMMA

        if not feasible(1.0):
            return None
        if not feasible(share):
            lo, hi = share, 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                lo, hi = (lo, mid) if feasible(mid) else (mid, hi)
            share = hi
        return self._beamformer(params, share, power)

    def test_relaxed_optimum_matches_search(self, cfg):
        system = cfg.updated(n_tx=2, n_rx=2)
        ch = ChannelSet.line_of_sight(system, ue_angle=math.radians(126.0), ue_gain=0.8,
                                      tag_angle=math.radians(45.0), tag_gain=0.8, h_tu=0.5, h_tu_max=0.5)
        sur = ch.surrogate(THETA_I)
        q_sdr = solve_detection(THETA_I, self.GAMMA, ch, system).q
        q_max = detection_q_max(system)

        def loss(params: np.ndarray) -> float:
            share = math.sin(params[4]) ** 2
            bf = self._beamformer(params, share, system.power_budget)
            shortfall = max(0.0, 1.0 - sinr_ue(bf, sur, system).value / self.GAMMA)
            return -sinr_ap_grid(bf, THETA_I, system).value / q_max + 10.0 * shortfall

        search = np.random.default_rng(11)
        best = 0.0
        for _ in range(24):
            start = search.uniform(0.0, 2.0 * math.pi, size=5)
            result = minimize(loss, start, method="Nelder-Mead",
                              options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 1500})
            bf = self._repaired(result.x, sur, system)
            if bf is not None:
                best = max(best, sinr_ap_grid(bf, THETA_I, system).value)

        assert best <= q_sdr * (1 + 1e-5)
        assert best >= 0.98 * q_sdr

    def test_unconstrained_detection_reaches_full_budget_gain(self, cfg):
        system = cfg.updated(n_tx=2, n_rx=2)
        ch = ChannelSet.line_of_sight(system, ue_angle=math.radians(126.0), ue_gain=0.8,
                                      tag_angle=math.radians(45.0), tag_gain=0.8, h_tu=0.5, h_tu_max=0.5)
        expected = (system.alpha * system.n_rx * system.n_tx * system.power_budget
                    / (system.alpha * system.n_rx * system.noise_tag + system.noise_ap))
        assert solve_detection(THETA_I, 0.0, ch, system).q == pytest.approx(expected, rel=1e-4)


class TestEstimatorOrdering:
    def test_lmmse_never_worse_than_ls(self, cfg, channels, rng):
        for _ in range(20):
            a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            r_w = a @ a.conj().T + 0.1 * np.eye(4)
            r_w *= cfg.power_budget / np.trace(r_w).real
            b = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            prior = EstimatorPrior(b @ b.conj().T + 0.01 * np.eye(4))
            assert lmmse_error(r_w, prior, channels.h_b, cfg) <= ls_error(r_w, channels.h_b, cfg) * (1 + 1e-12)

    def test_flat_prior_lmmse_stage_matches_ls(self, cfg, channels):
        gamma = db_to_linear(15.0)
        flat = EstimatorPrior(1e6 * np.eye(cfg.n_tx))
        ls = ls_stage_design(THETA_MAX, gamma, channels, cfg)
        lmmse = lmmse_stage_design(flat, THETA_MAX, gamma, channels, cfg)
        assert lmmse.objective == pytest.approx(ls.objective, rel=0.02)
        assert lmmse.objective <= ls.objective * (1 + 1e-6)

    @pytest.mark.slow
    def test_paired_batches_favor_lmmse(self, noisy_cfg, channels):
        prior = EstimatorPrior.exponential(noisy_cfg.n_tx, 0.9)
        bf = probing_only_beamformer(ls_optimal_covariance(noisy_cfg))
        report = run_lmmse_trials(bf, prior, channels, noisy_cfg, 10000, seed=21, batch_size=100)
        assert report.extra["paired_win_fraction"] >= 0.95

    @pytest.mark.slow
    def test_million_trial_false_alarm_rate(self, noisy_cfg):
        bf = probing_only_beamformer(ls_optimal_covariance(noisy_cfg))
        trials = 1_000_000
        report = run_h0_trials(bf, THETA_I, noisy_cfg, trials, seed=22)
        sigma = math.sqrt(noisy_cfg.pfa * (1.0 - noisy_cfg.pfa) / trials)
        assert abs(report.estimate - noisy_cfg.pfa) <= 3.0 * sigma


@pytest.mark.slow
class TestPresetSweeps:
    """Six-point sweeps of the bundled presets at full scale"""

    @staticmethod
    async def _sweep(name: str):
        scenario = presets.load_scenario(name)
        points = await runner.run_sweep_async(scenario, workers=1)
        assert len(points) == 6
        assert all(p["status"] == "ok" for p in points)
        assert all(p["empirical"] for p in points)
        return points

    async def test_detection_probability_falls_with_ue_threshold(self):
        points = await self._sweep("fig4")
        pd = [p["metrics"]["pd"] for p in points]
        q = [p["metrics"]["q"] for p in points]
        for before, after in zip(pd, pd[1:]):
            assert after <= before + 1e-9
        for before, after in zip(q, q[1:]):
            assert after <= before * (1 + 1e-6)
        assert q[-1] < q[0]

    @pytest.mark.parametrize("name,metric", [("fig6", "j_ls"), ("fig9", "j_lmmse")])
    async def test_estimation_error_grows_with_ue_threshold(self, name, metric):
        points = await self._sweep(name)
        errors = [p["metrics"][metric] for p in points]
        for before, after in zip(errors, errors[1:]):
            assert after >= before * (1 - 1e-6)
        assert errors[-1] > errors[0]

    async def test_rate_grows_with_power(self):
        points = await self._sweep("fig12")
        rates = [p["metrics"]["rate"] for p in points]
        for before, after in zip(rates, rates[1:]):
            assert after > before


@pytest.mark.slow
class TestPresetShapes:
    def test_detection_lobes(self):
        outcome = runner.solve_stage(presets.load_scenario("fig3"))
        peaks = local_maxima(signal_beampatterns(outcome.beamformer, FINE_GRID)["overall"])
        assert np.min(np.abs(peaks - 90.0)) <= 2.0
        assert np.min(np.abs(peaks - 126.0)) <= 2.0

    def test_ls_notch_toward_ue(self):
        outcome = runner.solve_stage(presets.load_scenario("fig5"))
        thetas = np.append(FINE_GRID, math.radians(126.0))
        pattern = signal_beampatterns(outcome.beamformer, thetas)["tag_probe"]
        assert pattern[-1] <= np.max(pattern) * 1e-3

    def test_communication_stage(self):
        settings = presets.load_scenario("fig11").sca
        outcome = runner.solve_stage(presets.load_scenario("fig11"))
        state = outcome.sca

        trace = state.objective_trace
        for before, after in zip(trace, trace[1:]):
            assert after >= before * (1 - 1e-6)
        assert all(len(values) <= 15 for values in state.inner_objectives)
        assert state.converged and state.iteration <= 8
        assert abs(state.y_trace[-1] - state.y_trace[-2]) < settings.eps_th

        pattern = signal_beampatterns(outcome.beamformer, FINE_GRID)["communication"]
        peak = float(np.degrees(FINE_GRID[int(np.argmax(pattern))]))
        assert abs(peak - 126.0) <= 2.0
        toward_tag = signal_beampatterns(outcome.beamformer, [math.radians(45.0)])["communication"][0]
        assert toward_tag <= np.max(pattern) * 1e-2


class TestBundleReproduction:
    def test_same_seed_same_bytes(self, tmp_path):
        scenario = presets.load_scenario("fig5").model_copy(update={"seed": 5})
        data = scenario.model_dump(by_alias=True)
        data["system"].update(n_tx=4, n_rx=4, sig_len=64)
        data["pattern"] = {"start_deg": 0.0, "stop_deg": 180.0, "step_deg": 5.0}
        data["trials"] = {"ls": 20}
        scenario = Scenario.model_validate(data)

        runner.run_scenario(scenario, tmp_path / "a")
        runner.run_scenario(scenario, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        assert "trials_ls.json" in names
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
