"""
Alternating rate maximizer for the communication-enhancement stage

The UE SINR ratio is rewritten with a quadratic transform in y. For fixed y
the AP-SINR constraint is replaced by its first-order inner approximation
around the current beamformer and the resulting second-order cone program is
solved repeatedly until the linearization term settles; y is then refreshed
in closed form.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from conic import Affine, ConicProgram, solve
from errors import BisacError, InfeasibleError, SolverFailure, ValidationError
from metrics import sinr_ap, sinr_tag, sinr_ue, ue_denominator
from models import ScaSettings, SolveReport, SolverOptions, SolveStatus, SystemConfig
from signal_model import Beamformer, ChannelSet, equal_gain_combiner

from .sdr import SdrSolution, extract_rank_one, recover_beamformer

logger = logging.getLogger(__name__)

FEASIBILITY_RTOL = 1e-6


@dataclass(frozen=True)
class ScaState:
    """Iterate and convergence history of the alternating maximizer"""
    w: Beamformer
    y: float
    objective_trace: Tuple[float, ...] = ()
    y_trace: Tuple[float, ...] = ()
    delta_trace: Tuple[float, ...] = ()
    inner_objectives: Tuple[Tuple[float, ...], ...] = ()
    iteration: int = 0
    inner_iterations: int = 0
    reinitialized: int = 0
    converged: bool = False
    initializer: str = ""
    reports: Tuple[SolveReport, ...] = ()


# ==================== Quadratic transform ====================

def qt_objective(bf: Beamformer, y: float, ch: ChannelSet, cfg: SystemConfig) -> float:
    """F(W, y) = 2y Re{h_u w_u} − y² D(W)"""
    signal = float(np.real(ch.h_u @ bf.w_u))
    return 2.0 * y * signal - y * y * ue_denominator(bf, ch, cfg)


def optimal_y(bf: Beamformer, ch: ChannelSet, cfg: SystemConfig) -> float:
    """Stationary point Re{h_u w_u}/D of F in y, with h_u w_u rotated onto the positive reals"""
    rotated = bf.rotated(ch.h_u, ch.h_f)
    denominator = ue_denominator(rotated, ch, cfg)
    if denominator <= 0.0:
        raise ValidationError(f"UE denominator must be positive, got {denominator}")
    return float(np.real(ch.h_u @ rotated.w_u)) / denominator


def ue_only_sinr(ch: ChannelSet, cfg: SystemConfig) -> float:
    """
    Largest UE SINR with no tag or AP requirement

    The whole budget goes to w_u and the optimum is P h_u M^{-1} h_u^H with
    M = (α|h_tu|²σ_t² + σ_u²) I + P α|h_tu|² F.
    """
    leak = cfg.alpha * abs(ch.h_tu) ** 2
    base = leak * cfg.noise_tag + cfg.noise_ue
    m = base * np.eye(ch.n_tx) + cfg.power_budget * leak * ch.forward_gram
    return cfg.power_budget * float(np.real(ch.h_u @ np.linalg.solve(m, ch.h_u.conj())))


# ==================== Constraint data ====================

def ap_power_requirement(gamma_apth: float, ch: ChannelSet, cfg: SystemConfig) -> float:
    """Smallest ‖h_f W‖² meeting the AP SINR threshold with the equal-gain combiner"""
    if gamma_apth <= 0.0:
        return 0.0
    if cfg.alpha == 0.0:
        return math.inf
    w_r = equal_gain_combiner(ch.h_b)
    gain = abs(complex(w_r @ ch.h_b)) ** 2
    noise = cfg.alpha * gain * cfg.noise_tag + float(np.real(np.vdot(w_r, w_r))) * cfg.noise_ap
    return gamma_apth * noise / (cfg.alpha * gain)


def meets_thresholds(bf: Beamformer, gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig,
                     rtol: float = FEASIBILITY_RTOL) -> bool:
    w_r = equal_gain_combiner(ch.h_b)
    tag_ok = sinr_tag(bf, ch.h_f, cfg.noise_tag).value >= gamma_tth * (1.0 - rtol)
    ap_ok = gamma_apth <= 0.0 or sinr_ap(bf, ch.h_f, ch.h_b, w_r, cfg).value >= gamma_apth * (1.0 - rtol)
    return tag_ok and ap_ok and bf.within_budget(cfg, rtol)


def _delta(new: Beamformer, anchor: Beamformer, h_f: np.ndarray, relative: bool = False) -> float:
    """|2 Re tr(W^H F (W − W‡))|, divided by tr(W^H F W) when relative"""
    current = h_f @ new.matrix
    step = h_f @ (new.matrix - anchor.matrix)
    term = abs(2.0 * float(np.real(np.vdot(current, step))))
    if not relative:
        return term
    energy = float(np.real(np.vdot(current, current)))
    return 0.0 if energy <= 1e-300 else term / energy


def _y_change(y_new: float, y_old: float, relative: bool = False) -> float:
    change = abs(y_new - y_old)
    return change / max(abs(y_new), 1e-300) if relative else change


# ==================== Initialization ====================

def build_initializer_program(gamma_tth: float, gamma_apth: float, ch: ChannelSet,
                              cfg: SystemConfig) -> ConicProgram:
    """Relaxed program maximizing the UE beam power under tag, AP and budget constraints"""
    n, p = cfg.n_tx, cfg.power_budget
    f, u = ch.forward_gram, ch.ue_gram
    program = ConicProgram("sca_initializer")
    r = program.hermitian("R", n)
    w_u = program.hermitian("Wu", n)
    w_t = program.hermitian("Wt", n)
    program.add_ge(1.0 - r.trace(), name="power")
    program.add_psd(r - w_u - w_t, name="covariance_split")
    program.add_psd(w_u, name="ue_beam")
    program.add_psd(w_t, name="tag_beam")
    if gamma_tth > 0.0:
        tag_power = (f @ w_t).trace()
        program.add_ge(
            tag_power * (1.0 + gamma_tth) - (f @ r).trace() * gamma_tth - gamma_tth * cfg.noise_tag / p,
            name="tag_sinr",
        )
    required = ap_power_requirement(gamma_apth, ch, cfg)
    if required > 0.0:
        program.add_ge((f @ r).trace() - required / p, name="ap_sinr")
    program.maximize((u @ w_u).trace() / float(np.real(np.vdot(ch.h_u, ch.h_u))))
    return program


def mrt_initializer(gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig) -> Beamformer:
    """
    MRT toward the tag at the smallest power meeting both thresholds; the
    remaining budget goes to w_u, zero-forced against h_f

    Raises:
        InfeasibleError: the tag beam alone needs more than the budget
    """
    h_f, h_u = ch.h_f, ch.h_u
    gain = float(np.real(np.vdot(h_f, h_f)))
    need = max(gamma_tth * cfg.noise_tag / gain, ap_power_requirement(gamma_apth, ch, cfg) / gain)
    p_t = need * (1.0 + 10 * FEASIBILITY_RTOL)
    if not p_t <= cfg.power_budget:
        raise InfeasibleError(
            f"tag beam needs {need:.4g} W, budget is {cfg.power_budget:.4g} W"
        )
    w_t = math.sqrt(p_t / gain) * h_f.conj()
    direction = h_u.conj() - h_f.conj() * (h_f @ h_u.conj()) / gain
    norm = float(np.linalg.norm(direction))
    spare = cfg.power_budget - p_t
    if norm <= 1e-12 * float(np.linalg.norm(h_u)) or spare <= 0.0:
        w_u = np.zeros(ch.n_tx, dtype=complex)
    else:
        w_u = math.sqrt(spare) * direction / norm
    return Beamformer(w_u, w_t, np.zeros((ch.n_tx, ch.n_tx), dtype=complex))


def initial_beamformer(gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig,
                       options: Optional[SolverOptions] = None) -> Tuple[Beamformer, str]:
    """Relaxed-program start, falling back to MRT toward the tag"""
    program = build_initializer_program(gamma_tth, gamma_apth, ch, cfg)
    report = solve(program, options)
    if report.status == SolveStatus.INFEASIBLE:
        raise InfeasibleError("communication-stage thresholds are infeasible within the budget", report)
    if report.optimal:
        p = cfg.power_budget
        relaxed = SdrSolution(
            stage="comm",
            r_w=report.values["R"] * p,
            w_u_mat=report.values["Wu"] * p,
            w_t_mat=report.values["Wt"] * p,
            objective=float(report.objective),
            theta=0.0,
            gamma_uth=0.0,
        )
        try:
            bf = recover_beamformer(extract_rank_one(relaxed, ch), ch)
            if meets_thresholds(bf, gamma_tth, gamma_apth, ch, cfg):
                return bf, "relaxed"
            logger.warning("Relaxed initializer misses a threshold, using MRT start")
        except BisacError as exc:
            logger.warning(f"Relaxed initializer unusable ({exc}), using MRT start")
    else:
        logger.warning(f"Initializer program ended with {report.status.value}, using MRT start")
    return mrt_initializer(gamma_tth, gamma_apth, ch, cfg), "mrt"


# ==================== Subproblem ====================

def build_sca_program(state: ScaState, gamma_tth: float, gamma_apth: float, ch: ChannelSet,
                      cfg: SystemConfig) -> ConicProgram:
    """
    Convex subproblem at fixed y around the anchor state.w

    Variables are Ŵ = W/√P. The UE denominator is measured in units of its
    constant part K = α|h_tu|²σ_t² + σ_u², so with ŷ = y√K the objective reads
    2ŷ Re{ĥ_u ŵ_u} − ŷ²(1 + τ), τ ≥ ‖z‖².
    """
    n, p = cfg.n_tx, cfg.power_budget
    h_f, h_u = ch.h_f, ch.h_u
    leak = cfg.alpha * abs(ch.h_tu) ** 2
    k = leak * cfg.noise_tag + cfg.noise_ue
    s = math.sqrt(p / k)
    y_hat = state.y * math.sqrt(k)

    program = ConicProgram("sca")
    w = program.complex("W", (n, n + 2))
    tau = program.real("tau")

    z = Affine.concat([(h_u @ w[:, 1:]) * s, (h_f @ w) * (s * math.sqrt(leak))])
    program.add_soc(tau + 1.0, Affine.concat([z * 2.0, tau - 1.0]), name="ue_denominator")
    program.add_soc(1.0, w, name="power")

    if gamma_tth > 0.0:
        g = math.sqrt(p / cfg.noise_tag)
        program.add_soc(
            (h_f @ w[:, 1]).real * (g / math.sqrt(gamma_tth)),
            Affine.concat([(h_f @ w[:, 0]) * g, (h_f @ w[:, 2:]) * g, 1.0]),
            name="tag_sinr",
        )

    required = ap_power_requirement(gamma_apth, ch, cfg)
    if required > 0.0:
        anchor = h_f @ state.w.matrix / math.sqrt(p)
        linear = ((h_f @ w) @ anchor.conj()).real * 2.0
        program.add_ge(linear - float(np.real(np.vdot(anchor, anchor))), required / p, name="ap_sinr")

    program.maximize((h_u @ w[:, 0]).real * (2.0 * y_hat * s) - tau * y_hat ** 2 - y_hat ** 2)
    return program


def _subproblem(state: ScaState, gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig,
                options: Optional[SolverOptions]) -> Tuple[Beamformer, SolveReport]:
    program = build_sca_program(state, gamma_tth, gamma_apth, ch, cfg)
    report = solve(program, options)
    if report.status == SolveStatus.INFEASIBLE:
        raise InfeasibleError("SCA subproblem is infeasible", report)
    if not report.optimal:
        raise SolverFailure(f"SCA subproblem ended with status {report.status.value}", report)
    w = np.asarray(report.values["W"]) * math.sqrt(cfg.power_budget)
    return Beamformer.from_matrix(w).rotated(ch.h_u, ch.h_f), report


def sca_subproblem(state: ScaState, gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig,
                   options: Optional[SolverOptions] = None) -> Beamformer:
    """
    One convex step at fixed y; the result meets the exact AP constraint

    Raises:
        InfeasibleError: the linearized set is empty, the caller re-initializes
    """
    return _subproblem(state, gamma_tth, gamma_apth, ch, cfg, options)[0]


# ==================== Alternating loop ====================

def _inner_loop(state: ScaState, gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig,
                settings: ScaSettings, options: Optional[SolverOptions]) -> ScaState:
    values = []
    relative = settings.convergence == "relative"
    step_rtol = (options or SolverOptions()).reltol
    for _ in range(settings.i_max):
        try:
            bf, report = _subproblem(state, gamma_tth, gamma_apth, ch, cfg, options)
        except InfeasibleError as exc:
            if state.reinitialized:
                raise SolverFailure("SCA subproblem infeasible after re-initialization", exc.report) from exc
            logger.warning("SCA subproblem infeasible, re-initializing from the MRT start")
            restart = mrt_initializer(gamma_tth, gamma_apth, ch, cfg).rotated(ch.h_u, ch.h_f)
            state = replace(state, w=restart, reinitialized=state.reinitialized + 1,
                            reports=state.reports + ((exc.report,) if exc.report else ()))
            continue
        except SolverFailure as exc:
            logger.warning(f"SCA subproblem failed ({exc.message}), keeping the current iterate")
            state = replace(state, reports=state.reports + ((exc.report,) if exc.report else ()))
            break
        value = qt_objective(bf, state.y, ch, cfg)
        current = qt_objective(state.w, state.y, ch, cfg)
        if value <= current + step_rtol * max(abs(current), 1e-300):
            # anchor already maximizes the surrogate to solver accuracy
            logger.debug(f"SCA inner step rejected: F = {value:.8g} vs {current:.8g}")
            values.append(current)
            state = replace(state, delta_trace=state.delta_trace + (0.0,),
                            inner_iterations=state.inner_iterations + 1, reports=state.reports + (report,))
            break
        delta = _delta(bf, state.w, ch.h_f, relative)
        values.append(value)
        state = replace(
            state,
            w=bf,
            delta_trace=state.delta_trace + (delta,),
            inner_iterations=state.inner_iterations + 1,
            reports=state.reports + (report,),
        )
        logger.debug(f"SCA inner step: F = {value:.8g}, delta = {delta:.3e}")
        if gamma_apth <= 0.0 or delta < settings.delta_th:
            break
    return replace(state, inner_objectives=state.inner_objectives + (tuple(values),))


def solve_comm_enhancement(gamma_tth: float, gamma_apth: float, ch: ChannelSet, cfg: SystemConfig,
                           settings: Optional[ScaSettings] = None,
                           options: Optional[SolverOptions] = None) -> Tuple[Beamformer, ScaState]:
    """
    Maximize the UE rate subject to tag SINR, AP SINR and power constraints

    Returns:
        (beamformer, final state with objective, y and δ traces)

    Raises:
        InfeasibleError: no starting point meets the thresholds
    """
    if gamma_tth < 0 or gamma_apth < 0:
        raise ValidationError("SINR thresholds must be nonnegative")
    settings = settings or ScaSettings()
    start, how = initial_beamformer(gamma_tth, gamma_apth, ch, cfg, options)
    start = start.rotated(ch.h_u, ch.h_f)
    y = optimal_y(start, ch, cfg)
    state = ScaState(
        w=start,
        y=y,
        objective_trace=(sinr_ue(start, ch, cfg).value,),
        y_trace=(y,),
        initializer=how,
    )
    logger.info(f"Communication stage start ({how}): SINR {state.objective_trace[0]:.6g}")

    for k in range(1, settings.k_max + 1):
        state = _inner_loop(state, gamma_tth, gamma_apth, ch, cfg, settings, options)
        y_new = optimal_y(state.w, ch, cfg)
        value = qt_objective(state.w, y_new, ch, cfg)
        change = _y_change(y_new, state.y, settings.convergence == "relative")
        state = replace(
            state,
            y=y_new,
            y_trace=state.y_trace + (y_new,),
            objective_trace=state.objective_trace + (value,),
            iteration=k,
        )
        logger.debug(f"SCA outer step {k}: SINR {value:.8g}, y change {change:.3e}")
        if change < settings.eps_th:
            state = replace(state, converged=True)
            break

    if not state.converged:
        logger.warning(f"SCA stopped at the outer cap of {settings.k_max} iterations")
    logger.info(
        f"Communication stage done: SINR {state.objective_trace[-1]:.6g} after "
        f"{state.iteration} outer / {state.inner_iterations} inner iterations"
    )
    return state.w, state
