"""
Array model, channels, waveform synthesis and the backscatter signal chain

Channel vectors are 1-D arrays read as row vectors, so h R h^H is
``h @ R @ h.conj()``. The backward channel h_b stores the receive signature
of the tag at the AP array; the AP observation is ``outer(h_b, y_b)``.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence, Union

import numpy as np

from errors import ValidationError
from models import SystemConfig

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence, np.random.Generator, None]


# ==================== Steering and channels ====================

def steering_tx(theta: float, n: int) -> np.ndarray:
    """a(θ)_k = exp(jπk sin θ), k = 0..n-1"""
    if n < 1:
        raise ValidationError(f"antenna count must be positive, got {n}")
    return np.exp(1j * np.pi * np.arange(n) * np.sin(theta))


def steering_rx(theta: float, n: int) -> np.ndarray:
    return steering_tx(theta, n)


def steering_matrix(thetas: Sequence[float], n: int) -> np.ndarray:
    """Rows are a(θ) for each grid angle"""
    thetas = np.asarray(thetas, dtype=float).reshape(-1, 1)
    return np.exp(1j * np.pi * np.arange(n)[None, :] * np.sin(thetas))


def los_channel(theta: float, gain: float, n: int, direction: Literal["tx", "rx"] = "tx") -> np.ndarray:
    if gain <= 0:
        raise ValidationError(f"channel gain must be positive, got {gain}")
    if direction == "tx":
        return gain * steering_tx(theta, n)
    if direction == "rx":
        return gain * steering_rx(theta, n)
    raise ValidationError(f"direction must be 'tx' or 'rx', got {direction!r}")


@dataclass(frozen=True)
class ChannelSet:
    """AP→tag, tag→AP, AP→UE and tag→UE channels"""
    h_f: np.ndarray
    h_b: np.ndarray
    h_u: np.ndarray
    h_tu: complex = 0.0
    h_tu_max: float = 0.0

    def __post_init__(self) -> None:
        for name in ("h_f", "h_b", "h_u"):
            value = np.asarray(getattr(self, name), dtype=complex).reshape(-1)
            if not np.all(np.isfinite(value)):
                raise ValidationError(f"channel {name} has non-finite entries")
            object.__setattr__(self, name, value)
        if self.h_f.size != self.h_u.size:
            raise ValidationError("h_f and h_u must have the same length")
        object.__setattr__(self, "h_tu", complex(self.h_tu))
        object.__setattr__(self, "h_tu_max", float(self.h_tu_max))

    @property
    def n_tx(self) -> int:
        return self.h_f.size

    @property
    def n_rx(self) -> int:
        return self.h_b.size

    @property
    def forward_gram(self) -> np.ndarray:
        """F = h_f^H h_f"""
        return np.outer(self.h_f.conj(), self.h_f)

    @property
    def ue_gram(self) -> np.ndarray:
        """U = h_u^H h_u"""
        return np.outer(self.h_u.conj(), self.h_u)

    @property
    def backward_gram(self) -> np.ndarray:
        """B = h_b h_b^H (kept for completeness; no constraint uses it)"""
        return np.outer(self.h_b, self.h_b.conj())

    def check(self, cfg: SystemConfig) -> "ChannelSet":
        if self.n_tx != cfg.n_tx or self.n_rx != cfg.n_rx:
            raise ValidationError(
                f"channel sizes ({self.n_tx}, {self.n_rx}) do not match "
                f"config ({cfg.n_tx}, {cfg.n_rx})"
            )
        if self.h_tu_max > 0 and abs(self.h_tu) > self.h_tu_max * (1 + 1e-12):
            raise ValidationError(f"|h_tu| = {abs(self.h_tu):.4g} exceeds h_tu_max = {self.h_tu_max:.4g}")
        return self

    def surrogate(self, theta: float) -> "ChannelSet":
        """Robust sensing channels: unit-gain LOS toward θ and |h_tu| at its bound"""
        return replace(
            self,
            h_f=steering_tx(theta, self.n_tx),
            h_b=steering_rx(theta, self.n_rx),
            h_tu=complex(self.h_tu_max),
        )

    @classmethod
    def line_of_sight(
        cls,
        cfg: SystemConfig,
        ue_angle: float,
        ue_gain: float,
        tag_angle: float,
        tag_gain: float,
        h_tu: complex,
        h_tu_max: float,
    ) -> "ChannelSet":
        return cls(
            h_f=los_channel(tag_angle, tag_gain, cfg.n_tx, "tx"),
            h_b=los_channel(tag_angle, tag_gain, cfg.n_rx, "rx"),
            h_u=los_channel(ue_angle, ue_gain, cfg.n_tx, "tx"),
            h_tu=h_tu,
            h_tu_max=h_tu_max,
        )


# ==================== Beamformer and waveform ====================

@dataclass(frozen=True)
class Beamformer:
    """Joint beamformer W = [w_u, w_t, W_s]"""
    w_u: np.ndarray
    w_t: np.ndarray
    w_probe: np.ndarray

    def __post_init__(self) -> None:
        w_u = np.asarray(self.w_u, dtype=complex).reshape(-1)
        w_t = np.asarray(self.w_t, dtype=complex).reshape(-1)
        w_probe = np.atleast_2d(np.asarray(self.w_probe, dtype=complex))
        n = w_u.size
        if w_t.size != n or w_probe.shape[0] != n:
            raise ValidationError(
                f"beamformer parts disagree: w_u {w_u.shape}, w_t {w_t.shape}, W_s {w_probe.shape}"
            )
        if not (np.all(np.isfinite(w_u)) and np.all(np.isfinite(w_t)) and np.all(np.isfinite(w_probe))):
            raise ValidationError("beamformer has non-finite entries")
        object.__setattr__(self, "w_u", w_u)
        object.__setattr__(self, "w_t", w_t)
        object.__setattr__(self, "w_probe", w_probe)

    @property
    def n_tx(self) -> int:
        return self.w_u.size

    @property
    def matrix(self) -> np.ndarray:
        return np.column_stack([self.w_u, self.w_t, self.w_probe])

    @property
    def covariance(self) -> np.ndarray:
        w = self.matrix
        return w @ w.conj().T

    @property
    def power(self) -> float:
        return float(np.real(np.vdot(self.matrix, self.matrix)))

    def within_budget(self, cfg: SystemConfig, rtol: float = 1e-6) -> bool:
        return self.power <= cfg.power_budget * (1 + rtol)

    def rotated(self, h_u: np.ndarray, h_f: np.ndarray) -> "Beamformer":
        """Rotate w_u and w_t so h_u w_u and h_f w_t are real nonnegative"""
        return replace(self, w_u=_align_phase(self.w_u, h_u), w_t=_align_phase(self.w_t, h_f))

    @classmethod
    def from_matrix(cls, w: np.ndarray) -> "Beamformer":
        w = np.asarray(w, dtype=complex)
        return cls(w_u=w[:, 0], w_t=w[:, 1], w_probe=w[:, 2:])

    @classmethod
    def zeros(cls, n: int) -> "Beamformer":
        return cls(np.zeros(n, complex), np.zeros(n, complex), np.zeros((n, n), complex))


def _align_phase(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    gain = complex(h @ w)
    if abs(gain) == 0.0:
        return w
    return w * (abs(gain) / gain)


@dataclass(frozen=True)
class WaveformBlock:
    """Stream matrix S, transmitted block X and tag code c_t"""
    streams: np.ndarray
    tx: Optional[np.ndarray] = None
    tag_code: Optional[np.ndarray] = field(default=None)

    @property
    def sig_len(self) -> int:
        return self.streams.shape[1]

    @property
    def data_rows(self) -> np.ndarray:
        return self.streams[:2]

    @property
    def probing(self) -> np.ndarray:
        return self.streams[2:]


# ==================== Seeding ====================

def make_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def child_seeds(seed: Union[int, np.random.SeedSequence], count: int) -> list:
    """Independent sub-seeds of one master seed"""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(count)


def complex_gaussian(rng: np.random.Generator, shape, power: float) -> np.ndarray:
    """Circular complex Gaussian samples with E|n|^2 = power"""
    scale = np.sqrt(power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def qpsk_symbols(rng: np.random.Generator, shape) -> np.ndarray:
    bits = rng.integers(0, 2, size=tuple(shape) + (2,))
    return ((2 * bits[..., 0] - 1) + 1j * (2 * bits[..., 1] - 1)) / np.sqrt(2.0)


def unitary_rows(count: int, length: int) -> np.ndarray:
    """First ``count`` rows of the length-point unitary DFT"""
    k = np.arange(count)[:, None]
    l = np.arange(length)[None, :]
    return np.exp(-2j * np.pi * k * l / length) / np.sqrt(length)


# ==================== Waveform synthesis ====================

def synth_streams(cfg: SystemConfig, rng_seed: Seed) -> WaveformBlock:
    """
    Two QPSK data rows and N_t probing rows with (1/L) S_s S_s^H = I

    The probing rows span the orthogonal complement of the data rows inside
    the span of the first N_t + 2 DFT rows, so they are exactly orthonormal
    and uncorrelated with the data over the block.
    """
    n, length = cfg.n_tx, cfg.sig_len
    if length <= n + 2:
        raise ValidationError(f"sig_len ({length}) must exceed n_tx + 2 ({n + 2})")
    rng = make_rng(rng_seed)
    data = qpsk_symbols(rng, (2, length))
    basis = np.column_stack([data.T, unitary_rows(n, length).T])
    q, _ = np.linalg.qr(basis)
    probing = np.sqrt(length) * q[:, 2:].T
    streams = np.vstack([data, probing])
    return WaveformBlock(streams=streams, tag_code=np.ones(length, dtype=complex))


def assemble_waveform(bf: Beamformer, streams: Union[WaveformBlock, np.ndarray]) -> np.ndarray:
    """X = W S"""
    s = streams.streams if isinstance(streams, WaveformBlock) else np.asarray(streams, dtype=complex)
    w = bf.matrix
    if s.shape[0] != w.shape[1]:
        raise ValidationError(f"stream rows ({s.shape[0]}) must equal beamformer columns ({w.shape[1]})")
    return w @ s


def sample_covariance(x: np.ndarray) -> np.ndarray:
    """R_X = (1/L) X X^H"""
    x = np.atleast_2d(np.asarray(x, dtype=complex))
    r = x @ x.conj().T / x.shape[1]
    return 0.5 * (r + r.conj().T)


def tag_code(length: int, rng_seed: Seed = None) -> np.ndarray:
    """All-ones when no seed is given, else random unit-modulus symbols"""
    if rng_seed is None:
        return np.ones(length, dtype=complex)
    rng = make_rng(rng_seed)
    return np.exp(2j * np.pi * rng.random(length))


# ==================== Backscatter chain ====================
# A None seed runs the stage noiselessly. Leading batch axes of the inputs
# broadcast through every stage.

def chain_tag_rx(x: np.ndarray, ch: ChannelSet, cfg: SystemConfig, noise_seed: Seed = None,
                 batch: Optional[int] = None) -> np.ndarray:
    """y_t = h_f X + n_t"""
    y = ch.h_f @ x
    shape = y.shape if batch is None else (batch,) + y.shape
    if noise_seed is None:
        return np.broadcast_to(y, shape).copy()
    return y + complex_gaussian(make_rng(noise_seed), shape, cfg.noise_tag)


def chain_backscatter(y_t: np.ndarray, c_t: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """y_b = sqrt(α) (y_t ⊙ c_t)"""
    return np.sqrt(cfg.alpha) * (y_t * c_t)


def chain_ap_rx(y_b: np.ndarray, ch: ChannelSet, cfg: SystemConfig, noise_seed: Seed = None) -> np.ndarray:
    """Y_ap = h_b^T y_b + N_ap"""
    y = ch.h_b[:, None] * y_b[..., None, :]
    if noise_seed is None:
        return y
    return y + complex_gaussian(make_rng(noise_seed), y.shape, cfg.noise_ap)


def chain_ue_rx(x: np.ndarray, y_b: np.ndarray, ch: ChannelSet, cfg: SystemConfig,
                noise_seed: Seed = None) -> np.ndarray:
    """y_u = h_u X + h_tu y_b + n_u"""
    y = ch.h_u @ x + ch.h_tu * y_b
    if noise_seed is None:
        return y
    return y + complex_gaussian(make_rng(noise_seed), y.shape, cfg.noise_ue)


def equal_gain_combiner(h_b: np.ndarray) -> np.ndarray:
    """Unit-norm combiner with w_r h_b^T = ‖h_b‖"""
    h_b = np.asarray(h_b, dtype=complex)
    norm = float(np.linalg.norm(h_b))
    if norm == 0.0:
        raise ValidationError("backward channel is zero")
    return h_b.conj() / norm


def combine(w_r: np.ndarray, y_ap: np.ndarray) -> np.ndarray:
    """ỹ = w_r Y_ap over the antenna axis"""
    return np.einsum("r,...rl->...l", w_r, y_ap)
