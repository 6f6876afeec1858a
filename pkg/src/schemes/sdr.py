"""
Relaxed stage designs for detection, LS and LMMSE beamforming

Each stage solves its relaxed program in normalized variables R̂ = R_W / P_T,
extracts rank-one W_u and W_t in closed form and recovers W = [w_u, w_t, W_s].
Sensing constraints use unit-gain surrogate channels toward the design angle
with |h_tu| at its bound; the UE channel h_u is the true one. The estimation
stages optimize R_W only and return W_u = R_W, W_t = 0 before extraction.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np

from conic import Affine, ConicProgram, check_solution, solve
from errors import DegenerateDirectionError, ExtractionInvalidError, InfeasibleError, SolverFailure, ValidationError
from linalg import hermitize, min_eigenvalue, psd_factor
from metrics import EstimatorPrior, estimation_gain
from models import ExtractionCheck, ResidualSummary, SolveReport, SolverOptions, SolveStatus, SystemConfig
from signal_model import Beamformer, ChannelSet, steering_tx

logger = logging.getLogger(__name__)

EXTRACTION_RTOL = 1e-7
DEGENERATE_RTOL = 1e-12


# ==================== Types ====================

@dataclass(frozen=True)
class SdrSolution:
    """Relaxed (or extracted) covariance split in physical units"""
    stage: str
    r_w: np.ndarray
    w_u_mat: np.ndarray
    w_t_mat: np.ndarray
    objective: float
    theta: float
    gamma_uth: float
    q: Optional[float] = None
    extracted: bool = False

    @property
    def scale(self) -> float:
        return max(float(np.real(np.trace(self.r_w))), 1e-300)


@dataclass(frozen=True)
class UeSinrConstraint:
    """Re Tr(A_u W_u) + Re Tr(A_r R_W) + const ≥ 0"""
    gamma: float
    a_u: np.ndarray
    a_r: np.ndarray
    const: float

    def evaluate(self, r_w: np.ndarray, w_u: np.ndarray) -> float:
        return float(np.real(np.trace(self.a_u @ w_u) + np.trace(self.a_r @ r_w))) + self.const

    def magnitude(self, r_w: np.ndarray, w_u: np.ndarray) -> float:
        return float(abs(np.trace(self.a_u @ w_u)) + abs(np.trace(self.a_r @ r_w)) + abs(self.const))

    def to_affine(self, r_hat: Affine, w_u_hat: Affine, power: float) -> Affine:
        """
        Constraint over normalized variables R̂ = R_W/P, Ŵ_u = W_u/P

        The row is divided by P and by its largest coefficient so it stays of
        unit order when σ²/P is tiny or large.
        """
        offset = self.const / power
        scale = max(float(np.linalg.norm(self.a_u)), float(np.linalg.norm(self.a_r)), abs(offset), 1e-300)
        return ((self.a_u / scale) @ w_u_hat).trace() + ((self.a_r / scale) @ r_hat).trace() + offset / scale


@dataclass(frozen=True)
class StageDesign:
    """Outcome of one relaxed stage: relaxed and extracted solutions and the beamformer"""
    stage: str
    beamformer: Beamformer
    relaxed: SdrSolution
    extracted: SdrSolution
    check: ExtractionCheck
    report: SolveReport
    residuals: ResidualSummary
    channels: ChannelSet

    @property
    def objective(self) -> float:
        return self.relaxed.objective


# ==================== Constraint builders ====================

def build_ue_sinr_constraint(gamma_uth: float, ch: ChannelSet, cfg: SystemConfig) -> UeSinrConstraint:
    """
    Tr(U W_u) − γ[Tr(U(R_W − W_u)) + α|h_tu|²(Tr(F R_W) + σ_t²) + σ_u²] ≥ 0

    With robust sensing channels pass the surrogate set; the stage-3 caller
    passes the true channels.
    """
    if gamma_uth < 0:
        raise ValidationError(f"gamma_uth must be nonnegative, got {gamma_uth}")
    u, f = ch.ue_gram, ch.forward_gram
    leak = cfg.alpha * abs(ch.h_tu) ** 2
    return UeSinrConstraint(
        gamma=gamma_uth,
        a_u=(1.0 + gamma_uth) * u,
        a_r=-gamma_uth * (u + leak * f),
        const=-gamma_uth * (leak * cfg.noise_tag + cfg.noise_ue),
    )


def detection_q_max(cfg: SystemConfig) -> float:
    """Largest q reachable with the whole budget on one beam"""
    return cfg.alpha * cfg.n_rx * cfg.n_tx * cfg.power_budget / (cfg.alpha * cfg.n_rx * cfg.noise_tag + cfg.noise_ap)


def _base_program(name: str, ue: UeSinrConstraint, cfg: SystemConfig) -> Tuple[ConicProgram, Affine, Affine, Affine]:
    n = cfg.n_tx
    program = ConicProgram(name)
    r = program.hermitian("R", n)
    w_u = program.hermitian("Wu", n)
    w_t = program.hermitian("Wt", n)
    program.add_ge(1.0 - r.trace(), name="power")
    program.add_ge(ue.to_affine(r, w_u, cfg.power_budget), name="ue_sinr")
    program.add_psd(r - w_u - w_t, name="covariance_split")
    program.add_psd(w_u, name="ue_beam")
    program.add_psd(w_t, name="tag_beam")
    return program, r, w_u, w_t


def _estimation_program(name: str, ue: UeSinrConstraint, cfg: SystemConfig) -> Tuple[ConicProgram, Affine]:
    """
    Covariance-only program for the estimation stages

    The estimation error depends on R_W alone, and W_u = R_W, W_t = 0 is the
    split that gives the UE the most signal, so the UE row is taken at that
    split and W_u, W_t are not optimization variables.
    """
    program = ConicProgram(name)
    r = program.hermitian("R", cfg.n_tx)
    program.add_ge(1.0 - r.trace(), name="power")
    program.add_ge(ue.to_affine(r, r, cfg.power_budget), name="ue_sinr")
    program.add_psd(r, name="covariance")
    return program, r


def build_detection_program(theta_i: float, gamma_uth: float, ch: ChannelSet,
                            cfg: SystemConfig) -> Tuple[ConicProgram, float]:
    """Relaxed detection program and the factor mapping q̂ to q"""
    sur = ch.surrogate(theta_i)
    program, r, _, _ = _base_program("detection", build_ue_sinr_constraint(gamma_uth, sur, cfg), cfg)
    q = program.real("q")
    a = steering_tx(theta_i, cfg.n_tx)
    # α N_r a R a^H ≥ q (α N_r σ_t² + σ_ap²) after dividing through by q_max
    program.add_ge(a @ r @ a.conj() - cfg.n_tx * q, name="detection")
    program.add_ge(q, name="q_nonnegative")
    program.maximize(q)
    return program, detection_q_max(cfg)


def build_ls_program(theta_max: float, gamma_uth: float, ch: ChannelSet,
                     cfg: SystemConfig) -> Tuple[ConicProgram, float]:
    """
    Trace-inverse epigraph [[N_t R̂, I], [I, T]] ⪰ 0, minimizing tr T

    Scaling R̂ by N_t puts the isotropic optimum at T = I, as the LMMSE
    program does with κ; the objective factor N_t/(P c) undoes it.
    """
    sur = ch.surrogate(theta_max)
    program, r = _estimation_program("ls", build_ue_sinr_constraint(gamma_uth, sur, cfg), cfg)
    n = cfg.n_tx
    t = program.hermitian("T", n)
    eye = np.eye(n)
    program.add_psd(Affine.bmat([[r * float(n), eye], [eye, t]]), name="trace_inverse")
    program.minimize(t.trace())
    c = estimation_gain(ch.h_b, cfg)
    return program, (math.inf if c == 0.0 else n / (cfg.power_budget * c))


def build_lmmse_program(prior: EstimatorPrior, theta_max: float, gamma_uth: float, ch: ChannelSet,
                        cfg: SystemConfig) -> Tuple[ConicProgram, float]:
    """
    Epigraph of tr((R_G^{-1} + c R_W)^{-1})

    The information matrix is divided by κ = ‖R_G^{-1}‖₂ + cP/N_t so both
    epigraph blocks are of unit order; the objective factor undoes it.
    """
    if prior.dim != cfg.n_tx:
        raise ValidationError(f"prior dimension {prior.dim} does not match n_tx {cfg.n_tx}")
    sur = ch.surrogate(theta_max)
    program, r = _estimation_program("lmmse", build_ue_sinr_constraint(gamma_uth, sur, cfg), cfg)
    n = cfg.n_tx
    c = estimation_gain(ch.h_b, cfg)
    gain = c * cfg.power_budget
    kappa = float(np.linalg.norm(prior.inverse, 2)) + gain / n
    information = r * (gain / kappa) + prior.inverse / kappa
    t = program.hermitian("T", n)
    eye = np.eye(n)
    program.add_psd(Affine.bmat([[information, eye], [eye, t]]), name="trace_inverse")
    program.minimize(t.trace())
    return program, 1.0 / kappa


# ==================== Solving ====================

def _solve_checked(program: ConicProgram, options: Optional[SolverOptions]) -> SolveReport:
    report = solve(program, options)
    if report.status == SolveStatus.INFEASIBLE:
        raise InfeasibleError(f"{program.name} program is infeasible", report)
    if not report.optimal:
        raise SolverFailure(f"{program.name} program ended with status {report.status.value}", report)
    return report


def _relaxed(stage: str, report: SolveReport, cfg: SystemConfig, objective: float, theta: float,
             gamma_uth: float, q: Optional[float] = None) -> SdrSolution:
    p = cfg.power_budget
    r_w = hermitize(report.values["R"] * p)
    # covariance-only programs put the whole of R_W on the UE beam
    w_u = hermitize(report.values["Wu"] * p) if "Wu" in report.values else r_w
    w_t = hermitize(report.values["Wt"] * p) if "Wt" in report.values else np.zeros_like(r_w)
    return SdrSolution(
        stage=stage,
        r_w=r_w,
        w_u_mat=w_u,
        w_t_mat=w_t,
        objective=objective,
        theta=theta,
        gamma_uth=gamma_uth,
        q=q,
    )


def _run_detection(theta_i: float, gamma_uth: float, ch: ChannelSet, cfg: SystemConfig,
                   options: Optional[SolverOptions]) -> Tuple[SdrSolution, SolveReport, ResidualSummary]:
    program, q_max = build_detection_program(theta_i, gamma_uth, ch, cfg)
    report = _solve_checked(program, options)
    q = max(float(report.values["q"]), 0.0) * q_max
    logger.info(f"Detection program solved: q = {q:.6g} after {report.iterations} iterations")
    return _relaxed("detect", report, cfg, q, theta_i, gamma_uth, q=q), report, check_solution(program, report)


def solve_detection(theta_i: float, gamma_uth: float, ch: ChannelSet, cfg: SystemConfig,
                    options: Optional[SolverOptions] = None) -> SdrSolution:
    """
    Maximize the detection SINR margin q at θ_i under the UE SINR constraint

    Raises:
        InfeasibleError: γ_uth cannot be met within the power budget
    """
    return _run_detection(theta_i, gamma_uth, ch, cfg, options)[0]


# ==================== Rank-one extraction ====================

def _rank_one(mat: np.ndarray, h: np.ndarray, name: str, scale: float) -> np.ndarray:
    """W h^H h W / (h W h^H); a numerically empty W maps to zero"""
    mat = hermitize(mat)
    if float(np.real(np.trace(mat))) <= DEGENERATE_RTOL * scale:
        return np.zeros_like(mat)
    v = mat @ h.conj()
    t = float(np.real(h @ v))
    if t <= DEGENERATE_RTOL * scale * max(float(np.real(np.vdot(h, h))), 1.0):
        raise DegenerateDirectionError(f"{name} carries no power toward its channel (h W h^H = {t:.3e})")
    return hermitize(np.outer(v, v.conj()) / t)


def extract_rank_one(sol: SdrSolution, ch: ChannelSet) -> SdrSolution:
    """
    Closed-form rank-one W̃_u and W̃_t with R_W and q unchanged

    ``ch`` is the channel set the constraints were built with. A numerically
    empty W̄_u or W̄_t comes back as a zero matrix, so the recovered w_u or
    w_t column is zero and its power stays in R_W.
    """
    scale = sol.scale
    return replace(
        sol,
        w_u_mat=_rank_one(sol.w_u_mat, ch.h_u, "W_u", scale),
        w_t_mat=_rank_one(sol.w_t_mat, ch.h_f, "W_t", scale),
        extracted=True,
    )


def verify_extraction(before: SdrSolution, after: SdrSolution, ch: ChannelSet, cfg: SystemConfig,
                      tolerance: float = EXTRACTION_RTOL) -> ExtractionCheck:
    """
    Check the four clauses that make the extraction optimal

    detection: the detection constraint still holds (detection stage only)
    ue_sinr: the UE constraint holds and Tr(U W̃_u) = Tr(U W̄_u)
    dominance: W̄_u − W̃_u ⪰ 0 and W̄_t − W̃_t ⪰ 0
    psd_chain: R̃_W − W̃_u − W̃_t ⪰ 0

    Raises:
        ExtractionInvalidError: naming the first failed clause
    """
    scale = before.scale
    margins = {}
    if before.q is not None:
        a = steering_tx(before.theta, cfg.n_tx)
        gain = cfg.alpha * cfg.n_rx
        lhs = gain * float(np.real(a @ after.r_w @ a.conj()))
        rhs = after.q * (gain * cfg.noise_tag + cfg.noise_ap)
        margins["detection"] = (lhs - rhs) / max(gain * cfg.n_tx * scale, 1e-300)

    ue = build_ue_sinr_constraint(before.gamma_uth, ch, cfg)
    ue_scale = max(ue.magnitude(before.r_w, before.w_u_mat), 1e-300)
    u_gain = float(np.real(np.vdot(ch.h_u, ch.h_u))) * scale
    power_before = float(np.real(ch.h_u @ before.w_u_mat @ ch.h_u.conj()))
    power_after = float(np.real(ch.h_u @ after.w_u_mat @ ch.h_u.conj()))
    margins["ue_sinr"] = min(
        ue.evaluate(after.r_w, after.w_u_mat) / ue_scale,
        -abs(power_after - power_before) / max(u_gain, 1e-300),
    )
    margins["dominance"] = min(
        min_eigenvalue(before.w_u_mat - after.w_u_mat),
        min_eigenvalue(before.w_t_mat - after.w_t_mat),
    ) / scale
    margins["psd_chain"] = min_eigenvalue(after.r_w - after.w_u_mat - after.w_t_mat) / scale

    check = ExtractionCheck(margins=margins, tolerance=tolerance)
    for clause, margin in margins.items():
        if margin < -tolerance:
            raise ExtractionInvalidError(clause, f"normalized margin {margin:.3e} below -{tolerance:.1e}")
    return check


def _column(mat: np.ndarray, h: np.ndarray) -> np.ndarray:
    t = float(np.real(h @ mat @ h.conj()))
    if t <= 0.0:
        return np.zeros(mat.shape[0], dtype=complex)
    return mat @ h.conj() / math.sqrt(t)


def recover_beamformer(sol: SdrSolution, ch: ChannelSet) -> Beamformer:
    """W = [w̃_u, w̃_t, W̃_s] with W W^H = R̃_W; h_u w̃_u and h_f w̃_t come out real nonnegative"""
    if not sol.extracted:
        raise ValidationError("recover_beamformer needs an extracted solution")
    w_u = _column(sol.w_u_mat, ch.h_u)
    w_t = _column(sol.w_t_mat, ch.h_f)
    rest = sol.r_w - np.outer(w_u, w_u.conj()) - np.outer(w_t, w_t.conj())
    w_probe = psd_factor(rest, tol=EXTRACTION_RTOL * sol.scale)
    return Beamformer(w_u=w_u, w_t=w_t, w_probe=w_probe)


# ==================== Stage pipelines ====================

def _finish(stage: str, relaxed: SdrSolution, report: SolveReport, residuals: ResidualSummary,
            sur: ChannelSet, cfg: SystemConfig) -> StageDesign:
    extracted = extract_rank_one(relaxed, sur)
    check = verify_extraction(relaxed, extracted, sur, cfg)
    beamformer = recover_beamformer(extracted, sur)
    logger.info(f"Stage {stage}: objective {relaxed.objective:.6g}, extraction margins {check.margins}")
    return StageDesign(stage, beamformer, relaxed, extracted, check, report, residuals, sur)


def detection_stage_design(theta_i: float, gamma_uth: float, ch: ChannelSet, cfg: SystemConfig,
                           options: Optional[SolverOptions] = None) -> StageDesign:
    relaxed, report, residuals = _run_detection(theta_i, gamma_uth, ch, cfg, options)
    return _finish("detect", relaxed, report, residuals, ch.surrogate(theta_i), cfg)


def _estimation_design(stage: str, build: Callable[[], Tuple[ConicProgram, float]], theta_max: float,
                       gamma_uth: float, ch: ChannelSet, cfg: SystemConfig,
                       options: Optional[SolverOptions]) -> StageDesign:
    program, factor = build()
    report = _solve_checked(program, options)
    objective = float(report.objective) * factor
    relaxed = _relaxed(stage, report, cfg, objective, theta_max, gamma_uth)
    return _finish(stage, relaxed, report, check_solution(program, report), ch.surrogate(theta_max), cfg)


def ls_stage_design(theta_max: float, gamma_uth: float, ch: ChannelSet, cfg: SystemConfig,
                    options: Optional[SolverOptions] = None) -> StageDesign:
    return _estimation_design(
        "ls", lambda: build_ls_program(theta_max, gamma_uth, ch, cfg), theta_max, gamma_uth, ch, cfg, options
    )


def lmmse_stage_design(prior: EstimatorPrior, theta_max: float, gamma_uth: float, ch: ChannelSet,
                       cfg: SystemConfig, options: Optional[SolverOptions] = None) -> StageDesign:
    return _estimation_design(
        "lmmse", lambda: build_lmmse_program(prior, theta_max, gamma_uth, ch, cfg),
        theta_max, gamma_uth, ch, cfg, options,
    )


def solve_ls_stage(theta_max: float, gamma_uth: float, ch: ChannelSet, cfg: SystemConfig,
                   options: Optional[SolverOptions] = None) -> Beamformer:
    """Minimize the LS estimation error at θ_max subject to the UE SINR constraint"""
    return ls_stage_design(theta_max, gamma_uth, ch, cfg, options).beamformer


def solve_lmmse_stage(prior: EstimatorPrior, theta_max: float, gamma_uth: float, ch: ChannelSet,
                      cfg: SystemConfig, options: Optional[SolverOptions] = None) -> Beamformer:
    """Minimize the asymptotic LMMSE error at θ_max subject to the UE SINR constraint"""
    return lmmse_stage_design(prior, theta_max, gamma_uth, ch, cfg, options).beamformer


# ==================== Baselines ====================

def detection_only_beamformer(theta: float, cfg: SystemConfig) -> Beamformer:
    """Whole budget on the MRT beam toward θ, all in the tag column"""
    a = steering_tx(theta, cfg.n_tx)
    w_t = math.sqrt(cfg.power_budget / cfg.n_tx) * a.conj()
    n = cfg.n_tx
    return Beamformer(np.zeros(n, complex), w_t, np.zeros((n, n), complex))


def probing_only_beamformer(r_w: np.ndarray) -> Beamformer:
    """Realize a covariance with probing streams only"""
    n = np.asarray(r_w).shape[0]
    probe = psd_factor(r_w, tol=EXTRACTION_RTOL * max(float(np.real(np.trace(r_w))), 1e-300))
    return Beamformer(np.zeros(n, complex), np.zeros(n, complex), probe)
