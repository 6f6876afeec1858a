"""
Stage solvers for joint beamforming
"""
from .sca import ScaState, optimal_y, qt_objective, sca_subproblem, solve_comm_enhancement, ue_only_sinr
from .sdr import (
    SdrSolution,
    StageDesign,
    build_ue_sinr_constraint,
    detection_only_beamformer,
    detection_stage_design,
    extract_rank_one,
    lmmse_stage_design,
    ls_stage_design,
    probing_only_beamformer,
    recover_beamformer,
    solve_detection,
    solve_lmmse_stage,
    solve_ls_stage,
    verify_extraction,
)

__all__ = [
    "ScaState",
    "SdrSolution",
    "StageDesign",
    "build_ue_sinr_constraint",
    "detection_only_beamformer",
    "detection_stage_design",
    "extract_rank_one",
    "lmmse_stage_design",
    "ls_stage_design",
    "optimal_y",
    "probing_only_beamformer",
    "qt_objective",
    "recover_beamformer",
    "sca_subproblem",
    "solve_comm_enhancement",
    "solve_detection",
    "solve_lmmse_stage",
    "solve_ls_stage",
    "ue_only_sinr",
    "verify_extraction",
]
