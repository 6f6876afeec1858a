"""
Waveform-level Monte-Carlo checks of the analytic metrics

Every run draws its randomness from child seeds of one master seed, so a
report is reproducible bit for bit. Trials run in fixed-size batches through
the signal-chain functions; per-batch samples are concatenated and reduced
with numpy's pairwise summation.
"""
import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from scipy import stats

from errors import SingularMatrixError, ValidationError
from linalg import erfc, psd_factor, pseudo_inverse
from metrics import (
    EstimatorPrior,
    cfar_threshold,
    detection_probability,
    estimation_gain,
    lmmse_error,
    ls_error,
    ls_error_exact,
    rate_ue,
    sinr_ap,
    sinr_ue,
    surrogate_channels,
)
from models import SystemConfig, TrialReport
from signal_model import (
    Beamformer,
    ChannelSet,
    assemble_waveform,
    chain_ap_rx,
    chain_backscatter,
    chain_tag_rx,
    chain_ue_rx,
    child_seeds,
    combine,
    complex_gaussian,
    equal_gain_combiner,
    make_rng,
    sample_covariance,
    synth_streams,
    tag_code,
)

logger = logging.getLogger(__name__)

Z95 = float(stats.norm.ppf(0.975))
DETECTION_BATCH = 20_000
SAMPLES_PER_BATCH = 1 << 20


def _batches(trials: int, size: int) -> List[int]:
    if trials < 1:
        raise ValidationError(f"trials must be positive, got {trials}")
    size = max(1, size)
    full, rest = divmod(trials, size)
    return [size] * full + ([rest] if rest else [])


def wilson_halfwidth(p: float, n: int) -> float:
    """Half-width of the 95% Wilson score interval"""
    z2 = Z95 * Z95
    return Z95 * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / (1.0 + z2 / n)


def _mean_ci(samples: np.ndarray) -> Tuple[float, float]:
    n = samples.size
    mean = float(np.mean(samples))
    if n < 2:
        return mean, 0.0
    return mean, Z95 * float(np.std(samples, ddof=1)) / math.sqrt(n)


def _pilot_block(bf: Beamformer, cfg: SystemConfig, seed: np.random.SeedSequence) -> np.ndarray:
    return assemble_waveform(bf, synth_streams(cfg, seed))


# ==================== Detection ====================

def _detection_setup(bf: Beamformer, theta: float, cfg: SystemConfig, seed: np.random.SeedSequence,
                     window: int):
    if not 1 <= window <= cfg.sig_len:
        raise ValidationError(f"window must lie in [1, {cfg.sig_len}], got {window}")
    sur = surrogate_channels(theta, cfg)
    w_r = equal_gain_combiner(sur.h_b)
    x_w = _pilot_block(bf, cfg, seed)[:, :window]
    # the template leaves out sqrt(α), the detector does not need to know it
    template = complex(w_r @ sur.h_b) * (sur.h_f @ x_w)
    r_x = sample_covariance(x_w)
    eta = cfar_threshold(r_x, sur, w_r, cfg.updated(alpha=1.0), n_samples=window)
    return sur, w_r, x_w, template, r_x, eta


def run_detection_trials(bf: Beamformer, theta_true: float, cfg: SystemConfig, trials: int, seed: int,
                         window: int = 1) -> TrialReport:
    """
    Empirical P_D of the correlation detector with a CFAR threshold

    The known block is the first ``window`` samples of the synthesized
    waveform; the reference is P_D at the window-integrated AP SINR of that
    block. ``extra['exact_reference']`` also accounts for the backscattered
    tag noise, which the closed form leaves out of the H1 variance.
    """
    batches = _batches(trials, DETECTION_BATCH)
    seeds = child_seeds(seed, 1 + 2 * len(batches))
    sur, w_r, x_w, template, r_x, eta = _detection_setup(bf, theta_true, cfg, seeds[0], window)
    code = tag_code(window)

    hits = 0
    for b, count in enumerate(batches):
        y_t = chain_tag_rx(x_w, sur, cfg, seeds[1 + 2 * b], batch=count)
        y_ap = chain_ap_rx(chain_backscatter(y_t, code, cfg), sur, cfg, seeds[2 + 2 * b])
        statistic = np.real(combine(w_r, y_ap) @ template.conj())
        hits += int(np.count_nonzero(statistic > eta))

    estimate = hits / trials
    gamma_window = window * sinr_ap(r_x, sur.h_f, sur.h_b, w_r, cfg).value
    reference = detection_probability(gamma_window, cfg.pfa)

    energy = float(np.real(np.vdot(template, template)))
    h1_noise = cfg.noise_ap * float(np.real(np.vdot(w_r, w_r))) \
        + cfg.alpha * abs(complex(w_r @ sur.h_b)) ** 2 * cfg.noise_tag
    sigma1 = math.sqrt(energy * h1_noise / 2.0)
    mean = math.sqrt(cfg.alpha) * energy
    exact = float(0.5 * erfc((eta - mean) / (sigma1 * math.sqrt(2.0)))) if sigma1 > 0 else float(mean > eta)

    logger.info(f"Detection trials at {math.degrees(theta_true):.2f} deg: P_D {estimate:.4f} vs {reference:.4f}")
    return TrialReport(
        kind="detection",
        trials=trials,
        estimate=estimate,
        ci95_halfwidth=wilson_halfwidth(estimate, trials),
        analytic_reference=reference,
        seed=seed,
        window=window,
        extra={"exact_reference": exact, "threshold": eta, "sinr_window": gamma_window},
    )


def run_h0_trials(bf: Beamformer, theta: float, cfg: SystemConfig, trials: int, seed: int, window: int = 1,
                  threshold_scale: float = 1.0) -> TrialReport:
    """Empirical false-alarm rate with no tag present"""
    batches = _batches(trials, DETECTION_BATCH)
    seeds = child_seeds(seed, 1 + len(batches))
    sur, w_r, _, template, _, eta = _detection_setup(bf, theta, cfg, seeds[0], window)
    eta *= threshold_scale

    alarms = 0
    for b, count in enumerate(batches):
        y_ap = chain_ap_rx(np.zeros((count, window), dtype=complex), sur, cfg, seeds[1 + b])
        statistic = np.real(combine(w_r, y_ap) @ template.conj())
        alarms += int(np.count_nonzero(statistic > eta))

    estimate = alarms / trials
    return TrialReport(
        kind="h0",
        trials=trials,
        estimate=estimate,
        ci95_halfwidth=wilson_halfwidth(estimate, trials),
        analytic_reference=cfg.pfa,
        seed=seed,
        window=window,
        extra={"threshold": eta, "threshold_scale": threshold_scale},
    )


# ==================== Estimation ====================

def run_ls_trials(bf: Beamformer, ch: ChannelSet, cfg: SystemConfig, trials: int, seed: int,
                  tag_noise: bool = True) -> TrialReport:
    """
    Mean ‖G − Ĝ_LS‖² for the fixed truth G = h_b^T h_f

    Raises:
        SingularMatrixError: the synthesized pilot block is rank deficient
    """
    if cfg.alpha == 0.0:
        raise ValidationError("LS trials need alpha > 0")
    batches = _batches(trials, SAMPLES_PER_BATCH // (cfg.n_rx * cfg.sig_len))
    seeds = child_seeds(seed, 1 + 2 * len(batches))
    x = _pilot_block(bf, cfg, seeds[0])
    x_pinv = pseudo_inverse(x)
    truth = np.outer(ch.h_b, ch.h_f)
    code = tag_code(cfg.sig_len)

    errors = []
    for b, count in enumerate(batches):
        y_t = chain_tag_rx(x, ch, cfg, seeds[1 + 2 * b] if tag_noise else None, batch=count)
        y_ap = chain_ap_rx(chain_backscatter(y_t, code, cfg), ch, cfg, seeds[2 + 2 * b])
        estimate = y_ap @ x_pinv / math.sqrt(cfg.alpha)
        errors.append(np.sum(np.abs(estimate - truth) ** 2, axis=(-2, -1)))

    mean, half = _mean_ci(np.concatenate(errors))
    return TrialReport(
        kind="ls",
        trials=trials,
        estimate=mean,
        ci95_halfwidth=half,
        analytic_reference=ls_error(sample_covariance(x), ch.h_b, cfg, tag_noise),
        seed=seed,
        extra={"exact_reference": ls_error_exact(x, ch.h_b, cfg, tag_noise), "tag_noise": float(tag_noise)},
    )


def lmmse_estimator(x: np.ndarray, prior: EstimatorPrior, h_b: np.ndarray, cfg: SystemConfig,
                    tag_noise: bool = False) -> np.ndarray:
    """K with Ĝ = Y K / sqrt(α), K = X^H (R_G X X^H + N_r σ̃²/α I)^{-1} R_G"""
    n = x.shape[0]
    if cfg.alpha == 0.0:
        return np.zeros((x.shape[1], n), dtype=complex)
    c = estimation_gain(h_b, cfg, tag_noise)
    loading = cfg.sig_len / c
    gram = x @ x.conj().T
    return x.conj().T @ np.linalg.solve(prior.r_g @ gram + loading * np.eye(n), prior.r_g)


def run_lmmse_trials(bf: Beamformer, prior: EstimatorPrior, ch: ChannelSet, cfg: SystemConfig, trials: int,
                     seed: int, tag_noise: bool = False, batch_size: Optional[int] = None) -> TrialReport:
    """
    Mean ‖G − Ĝ_LMMSE‖² with G drawn so that E{G^H G} = R_G

    The LS estimate on the same draws is reported as ``paired_estimate``
    when the pilot block has full row rank; ``extra['paired_win_fraction']``
    is the share of batches where LMMSE beats LS.
    """
    size = batch_size or max(1, SAMPLES_PER_BATCH // (cfg.n_rx * cfg.sig_len))
    batches = _batches(trials, size)
    seeds = child_seeds(seed, 1 + 3 * len(batches))
    x = _pilot_block(bf, cfg, seeds[0])
    k = lmmse_estimator(x, prior, ch.h_b, cfg, tag_noise)
    root = psd_factor(prior.r_g)
    try:
        x_pinv = pseudo_inverse(x) if cfg.alpha > 0.0 else None
    except SingularMatrixError:
        x_pinv = None
    code = tag_code(cfg.sig_len)
    scale = math.sqrt(cfg.alpha) if cfg.alpha > 0.0 else 1.0

    lmmse_errors, ls_errors, wins = [], [], 0
    for b, count in enumerate(batches):
        z = complex_gaussian(make_rng(seeds[1 + 3 * b]), (count, cfg.n_rx, cfg.n_tx), 1.0)
        g = z @ root.conj().T / math.sqrt(cfg.n_rx)
        if tag_noise:
            n_t = complex_gaussian(make_rng(seeds[2 + 3 * b]), (count, cfg.sig_len), cfg.noise_tag)
        else:
            n_t = np.zeros((count, cfg.sig_len), dtype=complex)
        y_ap = math.sqrt(cfg.alpha) * g @ x + chain_ap_rx(chain_backscatter(n_t, code, cfg), ch, cfg,
                                                          seeds[3 + 3 * b])
        err = np.sum(np.abs(y_ap @ k / scale - g) ** 2, axis=(-2, -1))
        lmmse_errors.append(err)
        if x_pinv is not None:
            err_ls = np.sum(np.abs(y_ap @ x_pinv / scale - g) ** 2, axis=(-2, -1))
            ls_errors.append(err_ls)
            wins += int(np.mean(err) <= np.mean(err_ls))

    mean, half = _mean_ci(np.concatenate(lmmse_errors))
    extra = {"tag_noise": float(tag_noise)}
    paired = None
    if ls_errors:
        paired = float(np.mean(np.concatenate(ls_errors)))
        extra["paired_win_fraction"] = wins / len(batches)
    return TrialReport(
        kind="lmmse",
        trials=trials,
        estimate=mean,
        ci95_halfwidth=half,
        analytic_reference=lmmse_error(sample_covariance(x), prior, ch.h_b, cfg, tag_noise),
        seed=seed,
        paired_estimate=paired,
        extra=extra,
    )


# ==================== Communication ====================

def run_rate_trials(bf: Beamformer, ch: ChannelSet, cfg: SystemConfig, trials: int, seed: int) -> TrialReport:
    """
    Empirical UE SINR with random tag symbols

    Each trial synthesizes a fresh block, passes it through the tag and UE
    chains and measures |h_u w_u|² against the residual after removing the
    known data stream.
    """
    if trials < 1:
        raise ValidationError(f"trials must be positive, got {trials}")
    seeds = child_seeds(seed, 4 * trials)
    signal = complex(ch.h_u @ bf.w_u)
    sinrs = np.empty(trials)
    for i in range(trials):
        block = synth_streams(cfg, seeds[4 * i])
        x = assemble_waveform(bf, block)
        y_t = chain_tag_rx(x, ch, cfg, seeds[4 * i + 1])
        y_b = chain_backscatter(y_t, tag_code(cfg.sig_len, seeds[4 * i + 2]), cfg)
        y_u = chain_ue_rx(x, y_b, ch, cfg, seeds[4 * i + 3])
        residual = y_u - signal * block.streams[0]
        sinrs[i] = abs(signal) ** 2 / float(np.mean(np.abs(residual) ** 2))

    mean, half = _mean_ci(sinrs)
    rate, rate_half = _mean_ci(np.log2(1.0 + sinrs))
    return TrialReport(
        kind="rate",
        trials=trials,
        estimate=mean,
        ci95_halfwidth=half,
        analytic_reference=sinr_ue(bf, ch, cfg).value,
        seed=seed,
        extra={
            "rate": rate,
            "rate_ci95": rate_half,
            "analytic_rate": rate_ue(bf, ch, cfg),
        },
    )
