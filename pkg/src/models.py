"""
Pydantic models for configuration, scenarios and reports
"""
import math
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def dbm_to_watts(value_dbm: float) -> float:
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


def linear_to_db(value: float) -> float:
    return 10.0 * math.log10(value) if value > 0 else -math.inf


# ==================== System ====================

class SystemConfig(BaseModel):
    """Array sizes, block length, noise powers and budgets (linear units)"""
    model_config = ConfigDict(frozen=True)

    n_tx: int = Field(..., ge=1, description="Transmit antennas N_t")
    n_rx: int = Field(..., ge=1, description="Receive antennas N_r")
    sig_len: int = Field(..., ge=2, description="Samples per block L")
    alpha: float = Field(..., ge=0.0, le=1.0, description="Backscatter modulation efficiency")
    noise_tag: float = Field(..., gt=0.0, description="Tag noise power [W]")
    noise_ap: float = Field(..., gt=0.0, description="AP noise power [W]")
    noise_ue: float = Field(..., gt=0.0, description="UE noise power [W]")
    power_budget: float = Field(..., gt=0.0, description="Transmit power budget P_T [W]")
    pfa: float = Field(1e-4, gt=0.0, lt=1.0, description="False-alarm probability")

    @model_validator(mode="after")
    def _check_dimensions(self) -> "SystemConfig":
        if self.n_tx > self.n_rx:
            raise ValueError(f"n_tx ({self.n_tx}) must not exceed n_rx ({self.n_rx})")
        if self.sig_len <= self.n_tx:
            raise ValueError(f"sig_len ({self.sig_len}) must exceed n_tx ({self.n_tx})")
        return self

    def updated(self, **changes: Any) -> "SystemConfig":
        """Validated copy with some fields replaced"""
        return SystemConfig(**{**self.model_dump(), **changes})


# ==================== Reports ====================

class SinrReport(BaseModel):
    """Signal-to-interference-plus-noise ratio"""
    value: float = Field(..., ge=0.0, description="Linear ratio")

    @computed_field  # type: ignore[misc]
    @property
    def decibels(self) -> float:
        return linear_to_db(self.value)


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"
    NUMERICAL_FAILURE = "NumericalFailure"


class SolverOptions(BaseModel):
    """Interior-point tolerances and acceptance thresholds"""
    maxiters: int = Field(200, ge=1)
    abstol: float = Field(1e-9, gt=0)
    reltol: float = Field(1e-8, gt=0)
    feastol: float = Field(1e-9, gt=0)
    accept_gap: float = Field(1e-6, gt=0, description="Reported relative gap bound")
    accept_residual: float = Field(1e-7, gt=0, description="Reported residual bound")


class SolveReport(BaseModel):
    """Certified outcome of one conic solve"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    program: str = Field(..., description="Program name")
    status: SolveStatus
    objective: Optional[float] = Field(None, description="Objective at the returned point")
    primal_objective: Optional[float] = None
    dual_objective: Optional[float] = None
    gap: Optional[float] = Field(None, description="Relative duality gap")
    primal_residual: Optional[float] = None
    dual_residual: Optional[float] = None
    iterations: int = 0
    restarted: bool = Field(False, description="Solved after a rescaled restart")
    values: Dict[str, Any] = Field(default_factory=dict, exclude=True)

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL


class ConstraintResidual(BaseModel):
    name: str
    kind: Literal["eq", "ge", "psd", "soc"]
    violation: float = Field(..., ge=0.0, description="Violation in problem units")
    scaled: float = Field(..., ge=0.0, description="Violation on normalized data")


class ResidualSummary(BaseModel):
    entries: List[ConstraintResidual] = Field(default_factory=list)

    @property
    def max_scaled(self) -> float:
        return max((e.scaled for e in self.entries), default=0.0)

    def violations(self, tol: float = 1e-7) -> List[ConstraintResidual]:
        return [e for e in self.entries if e.scaled > tol]

    def passes(self, tol: float = 1e-7) -> bool:
        return not self.violations(tol)


class ExtractionCheck(BaseModel):
    """Normalized slack of each rank-one extraction clause (≥ -tolerance passes)"""
    margins: Dict[str, float] = Field(default_factory=dict)
    tolerance: float = 1e-7

    @property
    def passed(self) -> bool:
        return all(m >= -self.tolerance for m in self.margins.values())


class TrialReport(BaseModel):
    """Monte-Carlo estimate against its analytic reference"""
    kind: str = Field(..., description="detection | h0 | ls | lmmse | rate")
    trials: int = Field(..., ge=1)
    estimate: float
    ci95_halfwidth: float = Field(..., ge=0.0)
    analytic_reference: float
    seed: int
    window: Optional[int] = Field(None, description="Samples per detection decision")
    paired_estimate: Optional[float] = Field(None, description="LS MSE on the same draws")
    extra: Dict[str, float] = Field(default_factory=dict)

    @computed_field  # type: ignore[misc]
    @property
    def relative_gap(self) -> float:
        return abs(self.estimate - self.analytic_reference) / max(abs(self.analytic_reference), 1e-300)

    def agrees(self, tolerance: float = 0.0) -> bool:
        """Reference lies within estimate ± max(CI, tolerance·|reference|)"""
        slack = max(self.ci95_halfwidth, tolerance * abs(self.analytic_reference))
        return abs(self.estimate - self.analytic_reference) <= slack


# ==================== Algorithms ====================

class ScaSettings(BaseModel):
    """Convergence controls of the alternating rate maximizer"""
    eps_th: float = Field(1e-4, gt=0, description="Outer tolerance on |y_k − y_{k−1}|")
    delta_th: float = Field(1e-5, gt=0, description="Inner tolerance on |2 Re tr(W^H F (W − W‡))|")
    convergence: Literal["absolute", "relative"] = Field(
        "absolute", description="relative divides the y change by |y| and the gradient term by tr(W^H F W)"
    )
    k_max: int = Field(30, ge=1, description="Outer iteration cap")
    i_max: int = Field(50, ge=1, description="Inner iteration cap")


class RuntimeConfig(BaseModel):
    """Process-level configuration read from the environment"""
    workers: int = Field(1, ge=1, description="Sweep worker processes")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = Field("INFO")


# ==================== Scenarios ====================

Stage = Literal["detect", "ls", "lmmse", "comm"]
SweepParameter = Literal["gamma_uth_db", "power_dbm", "gamma_tth_db", "gamma_apth_db"]


class SystemSpec(BaseModel):
    """System block in interface units (dBm / dB)"""
    model_config = ConfigDict(extra="forbid")

    n_tx: int = Field(16, ge=1)
    n_rx: int = Field(16, ge=1)
    sig_len: int = Field(2048, ge=2)
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    noise_dbm: float = Field(-40.0, description="Default noise power for every receiver")
    noise_tag_dbm: Optional[float] = None
    noise_ap_dbm: Optional[float] = None
    noise_ue_dbm: Optional[float] = None
    power_dbm: float = Field(0.0, description="Transmit budget P_T")
    pfa: float = Field(1e-4, gt=0.0, lt=1.0)

    def to_config(self) -> SystemConfig:
        def noise(value: Optional[float]) -> float:
            return dbm_to_watts(self.noise_dbm if value is None else value)

        return SystemConfig(
            n_tx=self.n_tx,
            n_rx=self.n_rx,
            sig_len=self.sig_len,
            alpha=self.alpha,
            noise_tag=noise(self.noise_tag_dbm),
            noise_ap=noise(self.noise_ap_dbm),
            noise_ue=noise(self.noise_ue_dbm),
            power_budget=dbm_to_watts(self.power_dbm),
            pfa=self.pfa,
        )


class ExplicitChannels(BaseModel):
    """Channel vectors given entry by entry as [re, im] pairs"""
    model_config = ConfigDict(extra="forbid")

    h_f: List[Tuple[float, float]]
    h_b: List[Tuple[float, float]]
    h_u: List[Tuple[float, float]]


class ChannelSpec(BaseModel):
    """Line-of-sight parameter block"""
    model_config = ConfigDict(extra="forbid")

    ue_angle_deg: float = Field(126.0, description="UE direction θ_u")
    ue_gain: float = Field(0.8, gt=0.0)
    tag_angle_deg: float = Field(45.0, description="Tag direction")
    tag_gain: float = Field(0.8, gt=0.0, description="Gain of h_f and h_b")
    h_tu: float = Field(0.5, ge=0.0, description="|h_tu|, tag to UE")
    h_tu_phase_deg: float = 0.0
    h_tu_max: float = Field(0.5, ge=0.0, description="Bound used for robust design")
    explicit: Optional[ExplicitChannels] = None

    @model_validator(mode="after")
    def _check_bound(self) -> "ChannelSpec":
        if self.h_tu > self.h_tu_max:
            raise ValueError(f"h_tu ({self.h_tu}) exceeds h_tu_max ({self.h_tu_max})")
        return self


class PriorSpec(BaseModel):
    """Channel correlation R_G = E{G^H G}"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["identity", "exponential", "diagonal"] = "exponential"
    rho: float = Field(0.9, ge=0.0, lt=1.0, description="Exponential correlation coefficient")
    scale: float = Field(1.0, gt=0.0)
    eigenvalues: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_diagonal(self) -> "PriorSpec":
        if self.kind == "diagonal":
            if not self.eigenvalues:
                raise ValueError("diagonal prior needs eigenvalues")
            if min(self.eigenvalues) <= 0:
                raise ValueError("prior eigenvalues must be positive")
        return self


class SweepSpec(BaseModel):
    """Inclusive one-parameter grid"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    parameter: SweepParameter
    start: float = Field(..., alias="from")
    stop: float = Field(..., alias="to")
    step: float = Field(..., gt=0.0)

    @model_validator(mode="after")
    def _check_order(self) -> "SweepSpec":
        if self.stop < self.start:
            raise ValueError(f"sweep bounds out of order: {self.start} > {self.stop}")
        return self

    def values(self) -> List[float]:
        count = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return [round(self.start + k * self.step, 9) for k in range(count)]


class TrialSpec(BaseModel):
    """Monte-Carlo passes attached to a run"""
    model_config = ConfigDict(extra="forbid")

    detection: int = Field(0, ge=0)
    h0: int = Field(0, ge=0)
    ls: int = Field(0, ge=0)
    lmmse: int = Field(0, ge=0)
    rate: int = Field(0, ge=0)
    window: int = Field(1, ge=1, description="Samples per detection decision")


class PatternSpec(BaseModel):
    """Beampattern angle grid in degrees"""
    model_config = ConfigDict(extra="forbid")

    start_deg: float = 0.0
    stop_deg: float = 180.0
    step_deg: float = Field(0.5, gt=0.0)

    def degrees(self) -> List[float]:
        count = int(math.floor((self.stop_deg - self.start_deg) / self.step_deg + 1e-9)) + 1
        return [round(self.start_deg + k * self.step_deg, 9) for k in range(count)]


_STAGE_SWEEPS: Dict[str, Tuple[str, ...]] = {
    "detect": ("gamma_uth_db", "power_dbm"),
    "ls": ("gamma_uth_db", "power_dbm"),
    "lmmse": ("gamma_uth_db", "power_dbm"),
    "comm": ("gamma_tth_db", "gamma_apth_db", "power_dbm"),
}


class Scenario(BaseModel):
    """One figure-reproduction run"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    description: str = ""
    stage: Stage
    system: SystemSpec = Field(default_factory=SystemSpec)
    channels: ChannelSpec = Field(default_factory=ChannelSpec)
    theta_i_deg: float = Field(90.0, description="Detection direction")
    theta_max_deg: float = Field(45.0, description="Direction of greatest interference")
    gamma_uth_db: float = Field(15.0, description="UE SINR threshold")
    gamma_tth_db: float = Field(15.0, description="Tag SINR threshold")
    gamma_apth_db: float = Field(12.0, description="AP SINR threshold")
    prior: PriorSpec = Field(default_factory=PriorSpec)
    sweep: Optional[SweepSpec] = None
    trials: TrialSpec = Field(default_factory=TrialSpec)
    pattern: PatternSpec = Field(default_factory=PatternSpec)
    sca: ScaSettings = Field(default_factory=ScaSettings)
    seed: int = Field(2024, ge=0)

    @field_validator("name")
    @classmethod
    def _strip_name(cls, value: str) -> str:
        return value.strip()

    @model_validator(mode="after")
    def _check_stage(self) -> "Scenario":
        if self.sweep is not None and self.sweep.parameter not in _STAGE_SWEEPS[self.stage]:
            allowed = ", ".join(_STAGE_SWEEPS[self.stage])
            raise ValueError(
                f"sweep parameter '{self.sweep.parameter}' does not apply to stage "
                f"'{self.stage}' (allowed: {allowed})"
            )
        if self.prior.kind == "diagonal" and len(self.prior.eigenvalues or []) != self.system.n_tx:
            raise ValueError("prior.eigenvalues must have n_tx entries")
        if self.channels.explicit is not None:
            ex = self.channels.explicit
            if len(ex.h_f) != self.system.n_tx or len(ex.h_u) != self.system.n_tx:
                raise ValueError("explicit h_f and h_u must have n_tx entries")
            if len(ex.h_b) != self.system.n_rx:
                raise ValueError("explicit h_b must have n_rx entries")
        return self

    def with_parameter(self, parameter: str, value: float) -> "Scenario":
        """Validated copy with one sweep parameter replaced"""
        data = self.model_dump(by_alias=True)
        if parameter == "power_dbm":
            data["system"]["power_dbm"] = value
        else:
            data[parameter] = value
        data["sweep"] = None
        return Scenario.model_validate(data)


class ValidationReport(BaseModel):
    source: str
    ok: bool
    name: Optional[str] = None
    stage: Optional[str] = None
    errors: List[str] = Field(default_factory=list)
