"""
Scenario execution: stage solves, baselines, Monte-Carlo passes, sweeps and
result files
"""
import asyncio
import csv
import json
import math
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import structlog

import telemetry
from errors import InfeasibleError, ValidationError
from metrics import (
    EstimatorPrior,
    detection_pattern,
    detection_probability,
    lmmse_error,
    lmmse_optimal_covariance,
    ls_error,
    ls_optimal_covariance,
    rate_ue,
    signal_beampatterns,
    sinr_ap,
    sinr_ap_grid,
    sinr_tag,
    sinr_ue,
)
from models import Scenario, SolveReport, SystemConfig, TrialReport, db_to_linear, linear_to_db
from schemes import (
    ScaState,
    StageDesign,
    detection_only_beamformer,
    detection_stage_design,
    lmmse_stage_design,
    ls_stage_design,
    solve_comm_enhancement,
    ue_only_sinr,
)
from signal_model import Beamformer, ChannelSet, equal_gain_combiner
from simkit import run_detection_trials, run_h0_trials, run_lmmse_trials, run_ls_trials, run_rate_trials

logger = structlog.get_logger()

TRIAL_KINDS = ("detection", "h0", "ls", "lmmse", "rate")
STAGE_TRIALS = {"detect": ("detection", "h0"), "ls": ("ls",), "lmmse": ("lmmse",), "comm": ("rate",)}
PATTERN_FLOOR = 1e-30


@dataclass
class StageOutcome:
    """Everything one stage solve produced"""
    stage: str
    beamformer: Beamformer
    metrics: Dict[str, float]
    baselines: Dict[str, Dict[str, float]]
    reports: List[SolveReport]
    design: Optional[StageDesign] = None
    sca: Optional[ScaState] = None
    trials: Dict[str, TrialReport] = field(default_factory=dict)


# ==================== Scenario context ====================

def build_channels(scenario: Scenario, cfg: SystemConfig) -> ChannelSet:
    spec = scenario.channels
    h_tu = spec.h_tu * np.exp(1j * math.radians(spec.h_tu_phase_deg))
    if spec.explicit is not None:
        def vec(pairs: List[Tuple[float, float]]) -> np.ndarray:
            return np.array([complex(re, im) for re, im in pairs])

        ch = ChannelSet(vec(spec.explicit.h_f), vec(spec.explicit.h_b), vec(spec.explicit.h_u), h_tu, spec.h_tu_max)
    else:
        ch = ChannelSet.line_of_sight(
            cfg,
            ue_angle=math.radians(spec.ue_angle_deg),
            ue_gain=spec.ue_gain,
            tag_angle=math.radians(spec.tag_angle_deg),
            tag_gain=spec.tag_gain,
            h_tu=h_tu,
            h_tu_max=spec.h_tu_max,
        )
    return ch.check(cfg)


def build_prior(scenario: Scenario, cfg: SystemConfig) -> EstimatorPrior:
    spec = scenario.prior
    if spec.kind == "identity":
        return EstimatorPrior(spec.scale * np.eye(cfg.n_tx))
    if spec.kind == "diagonal":
        return EstimatorPrior.diagonal([spec.scale * v for v in spec.eigenvalues or []])
    return EstimatorPrior.exponential(cfg.n_tx, spec.rho, spec.scale)


# ==================== Stage solves ====================

def _detect(scenario: Scenario, cfg: SystemConfig, ch: ChannelSet) -> StageOutcome:
    theta = math.radians(scenario.theta_i_deg)
    design = detection_stage_design(theta, db_to_linear(scenario.gamma_uth_db), ch, cfg)
    bf = design.beamformer
    gamma_ap = sinr_ap_grid(bf, theta, cfg).value
    metrics = {
        "q": design.relaxed.q or 0.0,
        "gamma_ap_db": linear_to_db(gamma_ap),
        "pd": detection_probability(gamma_ap, cfg.pfa),
        "ue_sinr_design_db": linear_to_db(sinr_ue(bf, design.channels, cfg).value),
        "ue_sinr_db": linear_to_db(sinr_ue(bf, ch, cfg).value),
        "power": bf.power,
    }
    baselines = {}
    for name, base in (
        ("detection_only", detection_only_beamformer(theta, cfg)),
        ("orthogonal", ls_optimal_covariance(cfg)),
    ):
        g = sinr_ap_grid(base, theta, cfg).value
        baselines[name] = {"gamma_ap_db": linear_to_db(g), "pd": detection_probability(g, cfg.pfa)}
    return StageOutcome("detect", bf, metrics, baselines, [design.report], design=design)


def _ls(scenario: Scenario, cfg: SystemConfig, ch: ChannelSet) -> StageOutcome:
    theta = math.radians(scenario.theta_max_deg)
    design = ls_stage_design(theta, db_to_linear(scenario.gamma_uth_db), ch, cfg)
    bf = design.beamformer
    metrics = {
        "j_ls": design.objective,
        "j_ls_recovered": ls_error(bf.covariance, ch.h_b, cfg),
        "ue_sinr_design_db": linear_to_db(sinr_ue(bf, design.channels, cfg).value),
        "ue_sinr_db": linear_to_db(sinr_ue(bf, ch, cfg).value),
        "power": bf.power,
    }
    baselines = {"orthogonal": {"j_ls": ls_error(ls_optimal_covariance(cfg), ch.h_b, cfg)}}
    return StageOutcome("ls", bf, metrics, baselines, [design.report], design=design)


def _lmmse(scenario: Scenario, cfg: SystemConfig, ch: ChannelSet) -> StageOutcome:
    theta = math.radians(scenario.theta_max_deg)
    prior = build_prior(scenario, cfg)
    design = lmmse_stage_design(prior, theta, db_to_linear(scenario.gamma_uth_db), ch, cfg)
    bf = design.beamformer
    metrics = {
        "j_lmmse": design.objective,
        "j_lmmse_recovered": lmmse_error(bf.covariance, prior, ch.h_b, cfg),
        "ue_sinr_design_db": linear_to_db(sinr_ue(bf, design.channels, cfg).value),
        "ue_sinr_db": linear_to_db(sinr_ue(bf, ch, cfg).value),
        "power": bf.power,
    }
    baselines = {
        "orthogonal": {"j_lmmse": lmmse_error(ls_optimal_covariance(cfg), prior, ch.h_b, cfg)},
        "water_filling": {"j_lmmse": lmmse_error(lmmse_optimal_covariance(prior, ch.h_b, cfg), prior, ch.h_b, cfg)},
    }
    return StageOutcome("lmmse", bf, metrics, baselines, [design.report], design=design)


def _comm(scenario: Scenario, cfg: SystemConfig, ch: ChannelSet) -> StageOutcome:
    bf, state = solve_comm_enhancement(
        db_to_linear(scenario.gamma_tth_db), db_to_linear(scenario.gamma_apth_db), ch, cfg, settings=scenario.sca
    )
    w_r = equal_gain_combiner(ch.h_b)
    metrics = {
        "rate": rate_ue(bf, ch, cfg),
        "ue_sinr_db": linear_to_db(sinr_ue(bf, ch, cfg).value),
        "tag_sinr_db": linear_to_db(sinr_tag(bf, ch.h_f, cfg.noise_tag).value),
        "ap_sinr_db": linear_to_db(sinr_ap(bf, ch.h_f, ch.h_b, w_r, cfg).value),
        "outer_iterations": float(state.iteration),
        "inner_iterations": float(state.inner_iterations),
        "power": bf.power,
    }
    baselines = {"ue_only": {"rate": math.log2(1.0 + ue_only_sinr(ch, cfg))}}
    return StageOutcome("comm", bf, metrics, baselines, list(state.reports), sca=state)


_STAGES = {"detect": _detect, "ls": _ls, "lmmse": _lmmse, "comm": _comm}


def solve_stage(scenario: Scenario) -> StageOutcome:
    cfg = scenario.system.to_config()
    ch = build_channels(scenario, cfg)
    outcome = _STAGES[scenario.stage](scenario, cfg, ch)
    telemetry.record_solves(scenario.stage, outcome.reports)
    return outcome


# ==================== Monte-Carlo passes ====================

def trial_plan(scenario: Scenario, trials_override: Optional[int] = None) -> Dict[str, int]:
    counts = {kind: getattr(scenario.trials, kind) for kind in TRIAL_KINDS}
    if trials_override is not None:
        active = [k for k, n in counts.items() if n > 0] or list(STAGE_TRIALS[scenario.stage])
        counts = {kind: (trials_override if kind in active else 0) for kind in TRIAL_KINDS}
    return {kind: n for kind, n in counts.items() if n > 0}


def run_trials(scenario: Scenario, outcome: StageOutcome, plan: Dict[str, int]) -> Dict[str, TrialReport]:
    cfg = scenario.system.to_config()
    ch = build_channels(scenario, cfg)
    theta_deg = scenario.theta_i_deg if scenario.stage == "detect" else scenario.channels.tag_angle_deg
    theta = math.radians(theta_deg)
    bf, window = outcome.beamformer, scenario.trials.window
    reports = {}
    for index, kind in enumerate(TRIAL_KINDS):
        if kind not in plan:
            continue
        seed = scenario.seed + index
        n = plan[kind]
        if kind == "detection":
            report = run_detection_trials(bf, theta, cfg, n, seed, window=window)
        elif kind == "h0":
            report = run_h0_trials(bf, theta, cfg, n, seed, window=window)
        elif kind == "ls":
            report = run_ls_trials(bf, ch, cfg, n, seed)
        elif kind == "lmmse":
            report = run_lmmse_trials(bf, build_prior(scenario, cfg), ch, cfg, n, seed)
        else:
            report = run_rate_trials(bf, ch, cfg, n, seed)
        telemetry.record_trials(report)
        logger.info("trials finished", scenario=scenario.name, kind=kind, trials=n,
                    estimate=report.estimate, reference=report.analytic_reference)
        reports[kind] = report
    return reports


# ==================== Result files ====================

def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return f"{float(value):.10g}"


def _write_json(path: Path, document: Any) -> None:
    path.write_text(json.dumps(document, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def beampattern_rows(scenario: Scenario, outcome: StageOutcome) -> Tuple[List[str], List[List[str]]]:
    """Patterns in dB relative to the run maximum plus the absolute overall power"""
    cfg = scenario.system.to_config()
    degrees = scenario.pattern.degrees()
    thetas = np.radians(degrees)
    patterns = signal_beampatterns(outcome.beamformer, thetas)
    peak = max(float(np.max(patterns["overall"])), 1e-300)

    def db(values: np.ndarray) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(values / peak, PATTERN_FLOOR))

    header = ["theta_deg", "overall_db", "communication_db", "tag_db", "probing_db", "tag_probe_db", "overall_linear"]
    columns = [
        np.asarray(degrees),
        db(patterns["overall"]),
        db(patterns["communication"]),
        db(patterns["tag"]),
        db(patterns["probing"]),
        db(patterns["tag_probe"]),
        patterns["overall"],
    ]
    if outcome.stage == "detect":
        header.append("pd_linear")
        columns.append(detection_pattern(outcome.beamformer, thetas, cfg))
    rows = [[_fmt(col[i]) for col in columns] for i in range(len(degrees))]
    return header, rows


def _solve_document(outcome: StageOutcome) -> Dict[str, Any]:
    document: Dict[str, Any] = {"reports": [r.model_dump(mode="json") for r in outcome.reports]}
    if outcome.design is not None:
        document["extraction"] = outcome.design.check.model_dump(mode="json")
        document["residuals"] = outcome.design.residuals.model_dump(mode="json")
    return document


def _convergence_document(state: ScaState) -> Dict[str, Any]:
    return {
        "objective_trace": list(state.objective_trace),
        "y_trace": list(state.y_trace),
        "delta_trace": list(state.delta_trace),
        "inner_objectives": [list(v) for v in state.inner_objectives],
        "iterations": state.iteration,
        "inner_iterations": state.inner_iterations,
        "converged": state.converged,
        "initializer": state.initializer,
        "reinitialized": state.reinitialized,
    }


def run_scenario(scenario: Scenario, out_dir: Path, trials_override: Optional[int] = None) -> StageOutcome:
    """
    Solve the scenario's stage and write its result bundle

    Files: beampattern.csv, solve_report.json, summary.json, convergence.json
    (communication stage) and trials_<kind>.json per Monte-Carlo pass.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("scenario started", scenario=scenario.name, stage=scenario.stage)

    outcome = solve_stage(scenario)
    outcome.trials = run_trials(scenario, outcome, trial_plan(scenario, trials_override))

    header, rows = beampattern_rows(scenario, outcome)
    with open(out_dir / "beampattern.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)

    _write_json(out_dir / "solve_report.json", _solve_document(outcome))
    _write_json(out_dir / "summary.json", {
        "scenario": scenario.name,
        "stage": scenario.stage,
        "seed": scenario.seed,
        "metrics": outcome.metrics,
        "baselines": outcome.baselines,
    })
    if outcome.sca is not None:
        _write_json(out_dir / "convergence.json", _convergence_document(outcome.sca))
    for kind, report in outcome.trials.items():
        _write_json(out_dir / f"trials_{kind}.json", report.model_dump(mode="json"))

    logger.info("scenario finished", scenario=scenario.name, out=str(out_dir), **outcome.metrics)
    return outcome


# ==================== Sweeps ====================

SWEEP_METRICS = {
    "detect": ("q", "pd"),
    "ls": ("j_ls",),
    "lmmse": ("j_lmmse",),
    "comm": ("rate",),
}
# metric -> Monte-Carlo pass whose estimate goes in the empirical column
SWEEP_TRIALS = {"pd": "detection", "j_ls": "ls", "j_lmmse": "lmmse", "rate": "rate"}


def _empirical(report: TrialReport, metric: str) -> Dict[str, float]:
    if metric == "rate":
        return {"estimate": report.extra["rate"], "ci95": report.extra["rate_ci95"]}
    return {"estimate": report.estimate, "ci95": report.ci95_halfwidth}


def evaluate_point(scenario_json: str, parameter: str, value: float,
                   trials_override: Optional[int] = None) -> Dict[str, Any]:
    """
    Solve one grid point; runs in a worker process

    When the scenario configures Monte-Carlo passes for its stage (or
    trials_override is given) they run on the point's beamformer and fill
    the empirical column.
    """
    scenario = Scenario.model_validate_json(scenario_json).with_parameter(parameter, value)
    cfg = scenario.system.to_config()
    try:
        outcome = _STAGES[scenario.stage](scenario, cfg, build_channels(scenario, cfg))
    except InfeasibleError as exc:
        reports = [exc.report.model_dump(mode="json")] if isinstance(exc.report, SolveReport) else []
        return {"value": value, "status": "infeasible", "metrics": {}, "reports": reports, "error": exc.message}
    names = SWEEP_METRICS[scenario.stage]
    wanted = {SWEEP_TRIALS[name] for name in names if name in SWEEP_TRIALS}
    plan = {kind: n for kind, n in trial_plan(scenario, trials_override).items() if kind in wanted}
    trials = run_trials(scenario, outcome, plan) if plan else {}
    return {
        "value": value,
        "status": "ok",
        "metrics": {name: outcome.metrics[name] for name in names},
        "empirical": {
            name: _empirical(trials[SWEEP_TRIALS[name]], name)
            for name in names if SWEEP_TRIALS.get(name) in trials
        },
        "reports": [r.model_dump(mode="json") for r in outcome.reports],
    }


def _executor(workers: int) -> Executor:
    if workers > 1:
        return ProcessPoolExecutor(max_workers=workers)
    return ThreadPoolExecutor(max_workers=1)


async def run_sweep_async(scenario: Scenario, workers: int = 1,
                          trials_override: Optional[int] = None) -> List[Dict[str, Any]]:
    """Evaluate every grid point concurrently; results come back in grid order"""
    if scenario.sweep is None:
        raise ValidationError(f"scenario '{scenario.name}' has no sweep block")
    parameter = scenario.sweep.parameter
    values = scenario.sweep.values()
    payload = scenario.model_dump_json(by_alias=True)
    loop = asyncio.get_running_loop()

    with _executor(workers) as pool:
        tasks = [loop.run_in_executor(pool, evaluate_point, payload, parameter, v, trials_override) for v in values]
        results = await asyncio.gather(*tasks, return_exceptions=True)

    points = []
    for value, result in zip(values, results):
        if isinstance(result, Exception):
            logger.error("grid point failed", scenario=scenario.name, parameter=parameter, value=value,
                         error=str(result))
            result = {"value": value, "status": "error", "metrics": {}, "reports": [], "error": str(result)}
        telemetry.record_grid_point(result["status"])
        telemetry.record_solves(scenario.stage, [SolveReport.model_validate(r) for r in result["reports"]])
        points.append(result)
    return points


def write_sweep(scenario: Scenario, points: List[Dict[str, Any]], out_dir: Path) -> None:
    """Long-format sweep.csv plus per-point solver summaries"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parameter = scenario.sweep.parameter if scenario.sweep else ""
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sweep_param", "value", "metric", "analytic", "empirical", "ci95"])
        for point in points:
            for name in SWEEP_METRICS[scenario.stage]:
                if name in point["metrics"]:
                    empirical = point.get("empirical", {}).get(name, {})
                    writer.writerow([
                        parameter, _fmt(point["value"]), name, _fmt(point["metrics"][name]),
                        _fmt(empirical.get("estimate")), _fmt(empirical.get("ci95")),
                    ])
            writer.writerow([parameter, _fmt(point["value"]), "status", point["status"], "", ""])
    _write_json(out_dir / "sweep_reports.json", [
        {key: point[key] for key in ("value", "status", "reports", "error") if key in point} for point in points
    ])


def run_sweep(scenario: Scenario, out_dir: Path, workers: int = 1,
              trials_override: Optional[int] = None) -> List[Dict[str, Any]]:
    logger.info("sweep started", scenario=scenario.name, workers=workers)
    points = asyncio.run(run_sweep_async(scenario, workers, trials_override))
    write_sweep(scenario, points, out_dir)
    ok = sum(1 for p in points if p["status"] == "ok")
    logger.info("sweep finished", scenario=scenario.name, points=len(points), ok=ok)
    return points
