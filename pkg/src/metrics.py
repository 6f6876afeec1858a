"""
Closed-form communication and sensing metrics
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from errors import NotPsdError, SingularMatrixError, ValidationError
from linalg import check_hermitian, erfc, erfc_inv, hermitian_evd, hermitize, pseudo_inverse
from models import SinrReport, SystemConfig
from signal_model import Beamformer, ChannelSet, steering_matrix, steering_rx, steering_tx, unitary_rows

logger = logging.getLogger(__name__)

CovarianceLike = Union[Beamformer, np.ndarray]


def _covariance(obj: CovarianceLike) -> np.ndarray:
    if isinstance(obj, Beamformer):
        return obj.covariance
    return hermitize(np.asarray(obj, dtype=complex))


def _quad(h: np.ndarray, r: np.ndarray) -> float:
    return float(np.real(h @ r @ h.conj()))


def _check_psd(r: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    r = check_hermitian(r, rtol=1e-9)
    lowest = float(sla.eigvalsh(hermitize(r))[0])
    if lowest < -rtol * max(1.0, float(np.linalg.norm(r))):
        raise NotPsdError(f"covariance has eigenvalue {lowest:.3e}")
    return r


@dataclass(frozen=True)
class EstimatorPrior:
    """Channel correlation R_G = E{G^H G}"""
    r_g: np.ndarray

    def __post_init__(self) -> None:
        r_g = hermitize(check_hermitian(self.r_g, rtol=1e-9))
        lowest = float(sla.eigvalsh(r_g)[0])
        if lowest <= 0.0:
            raise ValidationError(f"prior must be positive definite (min eigenvalue {lowest:.3e})")
        object.__setattr__(self, "r_g", r_g)

    @property
    def dim(self) -> int:
        return self.r_g.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return hermitize(np.linalg.inv(self.r_g))

    def scaled(self, factor: float) -> "EstimatorPrior":
        return EstimatorPrior(self.r_g * factor)

    @classmethod
    def exponential(cls, n: int, rho: float, scale: float = 1.0) -> "EstimatorPrior":
        idx = np.arange(n)
        return cls(scale * rho ** np.abs(idx[:, None] - idx[None, :]).astype(float))

    @classmethod
    def diagonal(cls, eigenvalues: Sequence[float]) -> "EstimatorPrior":
        return cls(np.diag(np.asarray(eigenvalues, dtype=float)))


# ==================== Beampatterns ====================

def beampattern(r_x: np.ndarray, thetas: Sequence[float]) -> np.ndarray:
    """P(θ) = a(θ) R_X a(θ)^H on each grid angle"""
    r_x = _check_psd(np.asarray(r_x, dtype=complex))
    a = steering_matrix(thetas, r_x.shape[0])
    return np.maximum(np.real(np.einsum("ti,ij,tj->t", a, r_x, a.conj())), 0.0)


def signal_beampatterns(bf: Beamformer, thetas: Sequence[float]) -> Dict[str, np.ndarray]:
    """Per-signal patterns of a joint beamformer"""
    comm = np.outer(bf.w_u, bf.w_u.conj())
    tag = np.outer(bf.w_t, bf.w_t.conj())
    probe = bf.w_probe @ bf.w_probe.conj().T
    return {
        "overall": beampattern(bf.covariance, thetas),
        "communication": beampattern(comm, thetas),
        "tag": beampattern(tag, thetas),
        "probing": beampattern(probe, thetas),
        "tag_probe": beampattern(tag + probe, thetas),
    }


# ==================== SINRs ====================

def sinr_tag(bf: Beamformer, h_f: np.ndarray, noise_tag: float) -> SinrReport:
    signal = abs(complex(h_f @ bf.w_t)) ** 2
    interference = abs(complex(h_f @ bf.w_u)) ** 2 + float(np.sum(np.abs(h_f @ bf.w_probe) ** 2))
    return SinrReport(value=signal / (interference + noise_tag))


def sinr_ap(
    bf: CovarianceLike,
    h_f: np.ndarray,
    h_b: np.ndarray,
    w_r: np.ndarray,
    cfg: SystemConfig,
    r_x: Optional[np.ndarray] = None,
) -> SinrReport:
    """
    SINR of the combined backscatter signal at the AP

    Args:
        r_x: realized sample covariance; defaults to R_W = W W^H
    """
    r = _covariance(bf) if r_x is None else hermitize(r_x)
    gain = abs(complex(w_r @ h_b)) ** 2
    numerator = cfg.alpha * gain * _quad(h_f, r)
    denominator = cfg.alpha * gain * cfg.noise_tag + float(np.real(np.vdot(w_r, w_r))) * cfg.noise_ap
    return SinrReport(value=max(numerator, 0.0) / denominator)


def sinr_ap_grid(bf: CovarianceLike, theta: float, cfg: SystemConfig) -> SinrReport:
    """AP SINR under LOS surrogate channels toward θ"""
    r = _covariance(bf)
    a = steering_tx(theta, r.shape[0])
    numerator = cfg.alpha * cfg.n_rx * _quad(a, r)
    return SinrReport(value=max(numerator, 0.0) / (cfg.alpha * cfg.n_rx * cfg.noise_tag + cfg.noise_ap))


def detection_probability(gamma_ap: float, pfa: float) -> float:
    """P_D = ½ erfc(erfc^{-1}(2 P_F) − sqrt(γ_ap))"""
    if not (0.0 < pfa < 1.0):
        raise ValidationError(f"pfa must lie in (0, 1), got {pfa}")
    if not gamma_ap >= 0.0:
        raise ValidationError(f"gamma_ap must be nonnegative, got {gamma_ap}")
    if math.isinf(gamma_ap):
        return 1.0
    return float(0.5 * erfc(erfc_inv(2.0 * pfa) - math.sqrt(gamma_ap)))


def detection_pattern(bf: CovarianceLike, thetas: Sequence[float], cfg: SystemConfig) -> np.ndarray:
    return np.array([detection_probability(sinr_ap_grid(bf, t, cfg).value, cfg.pfa) for t in thetas])


def ue_denominator(bf: Beamformer, ch: ChannelSet, cfg: SystemConfig) -> float:
    """Interference plus noise at the UE, including the tag re-scatter path"""
    h_u, h_f = ch.h_u, ch.h_f
    direct = abs(complex(h_u @ bf.w_t)) ** 2 + float(np.sum(np.abs(h_u @ bf.w_probe) ** 2))
    rescatter = cfg.alpha * abs(ch.h_tu) ** 2 * (_quad(h_f, bf.covariance) + cfg.noise_tag)
    return direct + rescatter + cfg.noise_ue


def sinr_ue(bf: Beamformer, ch: ChannelSet, cfg: SystemConfig) -> SinrReport:
    return SinrReport(value=abs(complex(ch.h_u @ bf.w_u)) ** 2 / ue_denominator(bf, ch, cfg))


def rate_ue(bf: Beamformer, ch: ChannelSet, cfg: SystemConfig) -> float:
    """Achievable rate in bits/s/Hz"""
    return float(np.log2(1.0 + sinr_ue(bf, ch, cfg).value))


# ==================== Estimation ====================

def estimation_gain(h_b: np.ndarray, cfg: SystemConfig, tag_noise: bool = True) -> float:
    """c = αL / (N_r(σ_ap² + α‖h_b‖²σ_t²)), the pilot-to-error scaling"""
    tag_term = cfg.alpha * float(np.real(np.vdot(h_b, h_b))) * cfg.noise_tag if tag_noise else 0.0
    return cfg.alpha * cfg.sig_len / (cfg.n_rx * (cfg.noise_ap + tag_term))


def ls_error(r_w: np.ndarray, h_b: np.ndarray, cfg: SystemConfig, tag_noise: bool = True) -> float:
    """LS channel-estimation MSE; +inf when r_w is singular or α = 0"""
    c = estimation_gain(h_b, cfg, tag_noise)
    if c == 0.0:
        return math.inf
    r_w = hermitize(r_w)
    try:
        factor = sla.cho_factor(r_w)
    except np.linalg.LinAlgError:
        return math.inf
    eye = np.eye(r_w.shape[0])
    trace = float(np.real(np.trace(sla.cho_solve(factor, eye))))
    if not np.isfinite(trace) or trace <= 0.0 or np.linalg.cond(r_w) > 1e14:
        return math.inf
    return trace / c


def ls_error_exact(x: np.ndarray, h_b: np.ndarray, cfg: SystemConfig, tag_noise: bool = True) -> float:
    """Finite-L LS error with the re-scattered tag noise treated as rank one"""
    if cfg.alpha == 0.0:
        return math.inf
    try:
        x_pinv = pseudo_inverse(x)
    except SingularMatrixError:
        return math.inf
    trace = float(np.real(np.vdot(x_pinv, x_pinv)))
    tag_term = cfg.alpha * float(np.real(np.vdot(h_b, h_b))) * cfg.noise_tag if tag_noise else 0.0
    return (cfg.n_rx * cfg.noise_ap + tag_term) * trace / cfg.alpha


def ls_optimal_covariance(cfg: SystemConfig) -> np.ndarray:
    return (cfg.power_budget / cfg.n_tx) * np.eye(cfg.n_tx, dtype=complex)


def lmmse_error(r_w: np.ndarray, prior: EstimatorPrior, h_b: np.ndarray, cfg: SystemConfig,
                tag_noise: bool = True) -> float:
    """tr((R_G^{-1} + c R_W)^{-1})"""
    c = estimation_gain(h_b, cfg, tag_noise)
    information = prior.inverse + c * hermitize(r_w)
    return float(np.real(np.trace(np.linalg.inv(hermitize(information)))))


def lmmse_optimal_covariance(prior: EstimatorPrior, h_b: np.ndarray, cfg: SystemConfig,
                             tag_noise: bool = True) -> np.ndarray:
    """
    Water-filling over the eigenmodes of R_G

    Mode k receives (1/c)·max(μ − 1/λ_k, 0) with the water level μ set by
    bisection so the trace equals P_T.
    """
    if cfg.power_budget <= 0:
        raise ValidationError("power budget must be positive")
    c = estimation_gain(h_b, cfg, tag_noise)
    if c == 0.0:
        raise ValidationError("water-filling needs alpha > 0")
    values, vectors = hermitian_evd(prior.r_g)
    floors = 1.0 / values
    budget = cfg.power_budget

    def excess(mu: float) -> float:
        return float(np.sum(np.maximum(mu - floors, 0.0))) / c - budget

    low = float(floors.min())
    high = float(floors.max()) + 2.0 * budget * c
    mu = optimize.bisect(excess, low, high, xtol=1e-15 * high, rtol=4 * np.finfo(float).eps, maxiter=500)
    powers = np.maximum(mu - floors, 0.0) / c
    powers *= budget / powers.sum()
    logger.debug(f"water level {mu:.6g}, active modes {int(np.count_nonzero(powers))}/{powers.size}")
    return hermitize((vectors * powers) @ vectors.conj().T)


def waterfilling_waveform(prior: EstimatorPrior, h_b: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Pilot block X with (1/L) X X^H equal to the water-filling covariance"""
    r_w = lmmse_optimal_covariance(prior, h_b, cfg)
    values, vectors = hermitian_evd(r_w)
    root = vectors * np.sqrt(np.clip(values, 0.0, None))
    return np.sqrt(cfg.sig_len) * root @ unitary_rows(cfg.n_tx, cfg.sig_len)


# ==================== Detection threshold ====================

def cfar_threshold(
    bf: CovarianceLike,
    ch_surrogate: ChannelSet,
    w_r: np.ndarray,
    cfg: SystemConfig,
    r_x: Optional[np.ndarray] = None,
    n_samples: Optional[int] = None,
) -> float:
    """
    Threshold η with P(T > η | H0) = P_F for T = Re{ỹ (sqrt(α) w_r h_b h_f X)^H}

    Under H0 the statistic is zero-mean Gaussian with variance
    (σ_ap²/2)‖w_r‖² α|w_r h_b|² h_f R_X h_f^H L.
    """
    r = _covariance(bf) if r_x is None else hermitize(r_x)
    samples = cfg.sig_len if n_samples is None else n_samples
    gain = abs(complex(w_r @ ch_surrogate.h_b)) ** 2
    variance = (cfg.noise_ap / 2.0) * float(np.real(np.vdot(w_r, w_r))) * cfg.alpha * gain \
        * _quad(ch_surrogate.h_f, r) * samples
    return float(math.sqrt(2.0 * variance) * erfc_inv(2.0 * cfg.pfa))


def surrogate_channels(theta: float, cfg: SystemConfig, h_tu_max: float = 0.0) -> ChannelSet:
    """Unit-gain LOS channels toward θ with no UE link"""
    return ChannelSet(
        h_f=steering_tx(theta, cfg.n_tx),
        h_b=steering_rx(theta, cfg.n_rx),
        h_u=np.zeros(cfg.n_tx, dtype=complex),
        h_tu=h_tu_max,
        h_tu_max=h_tu_max,
    )
