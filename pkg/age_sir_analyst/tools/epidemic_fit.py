"""Data tools: preprocessing of case counts, phase detection and rate estimation."""

import logging
from typing import Dict, List, Optional

from .. import dataio
from ..errors import AgeSirError
from ..estimation import estimate_per_phase, fitted_trajectory
from ..phase_detect import PhaseConfig, detect_phases
from ..settings import get_settings
from .workspace import error, results_path, workspace_path

logger = logging.getLogger(__name__)


# ------------- Tool: cumulative counts -> S, I, R fractions -------------
def preprocess_case_counts(cases_file: str, populations: List[int],
                           recovery_days: Optional[int] = None,
                           smoothing_window: Optional[int] = None) -> Dict:
    """
    Turns a cumulative case-count CSV (date,group_1,...,group_m) into daily
    S, I, R fractions. populations gives the size of each age group.
    Writes results/trajectory.csv.
    """
    settings = get_settings()
    try:
        cfg = dataio.PreprocessConfig(
            populations=populations,
            T_R=settings.recovery_days if recovery_days is None else recovery_days,
            smoothing_window=settings.smoothing_window if smoothing_window is None else smoothing_window,
        )
        result = dataio.preprocess(workspace_path(cases_file), cfg)
        path = dataio.write_trajectory_csv(result.trajectory, results_path("trajectory.csv"))
    except (AgeSirError, ValueError) as exc:
        return error(str(exc))
    logger.info("preprocessed %s into %s", cases_file, path)
    return {
        "status": "success",
        "trajectory_file": path,
        "days": len(result.trajectory),
        "first_date": str(result.raw.dates[0].date()),
        "last_date": str(result.raw.dates[-1].date()),
        "groups": result.raw.groups,
    }


# ------------- Tool: phase boundaries -------------
def detect_contact_phases(trajectory_file: str, window: Optional[int] = None, step: Optional[int] = None,
                          delta: Optional[float] = None, min_phase: Optional[int] = None) -> Dict:
    """
    Finds the days where age-group contact rates change in a daily trajectory
    CSV. Unset options use the configured defaults (30-day window, 5-day step,
    threshold 3, 20-day minimum phase). Writes results/phases.json.
    """
    settings = get_settings()
    try:
        cfg = PhaseConfig.from_settings(settings, w=window, dp=step, delta=delta, min_phase=min_phase)
        data = dataio.read_trajectory_csv(workspace_path(trajectory_file))
        phases = detect_phases(data, cfg, n_jobs=settings.n_jobs, tol=settings.nnls_tol)
        path = dataio.write_json(phases.to_dict(), results_path("phases.json"))
    except (AgeSirError, ValueError) as exc:
        return error(str(exc))
    logger.info("phase boundaries %s written to %s", list(phases.boundaries), path)
    return {
        "status": "success",
        "phases_file": path,
        "boundaries": list(phases.boundaries),
        "flagged_before_merge": list(phases.flagged),
        "n_phases": len(phases.boundaries) + 1,
    }


# ------------- Tool: per-phase contact-rate estimates -------------
def estimate_contact_rates(trajectory_file: str, phases_file: Optional[str] = None) -> Dict:
    """
    Estimates the contact-rate matrix A and recovery rates gamma for each phase
    of a daily trajectory. phases_file is a phases JSON from
    detect_contact_phases; without it the whole timeline is one phase.
    Writes results/estimates.json and results/fitted.csv.
    """
    settings = get_settings()
    try:
        data = dataio.read_trajectory_csv(workspace_path(trajectory_file))
        boundaries = dataio.read_phase_boundaries(workspace_path(phases_file)) if phases_file else []
        estimates = estimate_per_phase(data, boundaries, settings.lambda_reg, tol=settings.nnls_tol)
        est_path = dataio.write_json([e.to_dict() for e in estimates], results_path("estimates.json"))
        fitted, fit_error = fitted_trajectory(data, estimates)
        fit_path = dataio.write_trajectory_csv(fitted, results_path("fitted.csv"))
    except AgeSirError as exc:
        return error(str(exc))
    return {
        "status": "success",
        "estimates_file": est_path,
        "fitted_file": fit_path,
        "fit_mse": fit_error,
        "phases": [e.to_dict() for e in estimates],
    }
