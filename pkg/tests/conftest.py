"""
Shared fixtures: a small array so every conic solve stays fast
"""
import math

import numpy as np
import pytest

from metrics import EstimatorPrior
from models import SystemConfig
from signal_model import ChannelSet


@pytest.fixture
def cfg() -> SystemConfig:
    return SystemConfig(
        n_tx=4,
        n_rx=4,
        sig_len=64,
        alpha=0.5,
        noise_tag=1e-7,
        noise_ap=1e-7,
        noise_ue=1e-7,
        power_budget=1.0,
    )


@pytest.fixture
def noisy_cfg() -> SystemConfig:
    """Noise comparable to the signal, so estimators and detectors are far from saturation"""
    return SystemConfig(
        n_tx=4,
        n_rx=4,
        sig_len=64,
        alpha=0.5,
        noise_tag=1e-6,
        noise_ap=4.0,
        noise_ue=0.05,
        power_budget=1.0,
        pfa=0.01,
    )


@pytest.fixture
def channels(cfg: SystemConfig) -> ChannelSet:
    return ChannelSet.line_of_sight(
        cfg,
        ue_angle=math.radians(126.0),
        ue_gain=0.8,
        tag_angle=math.radians(45.0),
        tag_gain=0.8,
        h_tu=0.5,
        h_tu_max=0.5,
    )


@pytest.fixture
def prior(cfg: SystemConfig) -> EstimatorPrior:
    return EstimatorPrior.exponential(cfg.n_tx, 0.9)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def full_scale():
    """0 dBm budget, -40 dBm noise and L = 2048, as in the preset scenarios"""
    def build(n: int = 4):
        system = SystemConfig(
            n_tx=n,
            n_rx=n,
            sig_len=2048,
            alpha=0.5,
            noise_tag=1e-7,
            noise_ap=1e-7,
            noise_ue=1e-7,
            power_budget=1e-3,
        )
        channels = ChannelSet.line_of_sight(
            system,
            ue_angle=math.radians(126.0),
            ue_gain=0.8,
            tag_angle=math.radians(45.0),
            tag_gain=0.8,
            h_tu=0.5,
            h_tu_max=0.5,
        )
        return system, channels
    return build
