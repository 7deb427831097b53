import logging
from typing import Dict, Optional

import pandas as pd
from google.adk.agents import Agent

from .. import dataio
from ..errors import AgeSirError
from ..estimation import group_rankings
from ..settings import get_settings
from ..tools.workspace import error, workspace_path

logger = logging.getLogger(__name__)


# ---------------- Tool 1: summarize detected phases -----------------
def summarize_phases(phases_file: str = "results/phases.json", start_date: Optional[str] = None) -> Dict:
    """
    Reads a phases JSON and lists each phase with its first and last day,
    plus calendar dates when start_date (the date of day 0, YYYY-MM-DD) is given.
    """
    try:
        payload = dataio.read_phases_json(workspace_path(phases_file))
        origin = pd.Timestamp(start_date) if start_date else None
    except (AgeSirError, ValueError) as exc:
        return error(str(exc))
    edges = [payload["start_day"]] + payload["boundaries"] + [payload["end_day"]]
    phases = []
    for idx, (start, end) in enumerate(zip(edges[:-1], edges[1:])):
        phase = {"phase": idx + 1, "start_day": start, "end_day": end, "days": end - start}
        if origin is not None:
            phase["start_date"] = str((origin + pd.Timedelta(days=start)).date())
            phase["end_date"] = str((origin + pd.Timedelta(days=end)).date())
        phases.append(phase)
    strongest = sorted(payload.get("windows", []), key=lambda w: -w["ratio"])[:3]
    return {
        "status": "success",
        "n_phases": len(phases),
        "phases": phases,
        "strongest_changes": [{"day": w["p"], "ratio": w["ratio"]} for w in strongest],
    }


# ---------------- Tool 2: rank age groups from estimates --------
def rank_age_groups(estimates_file: str = "results/estimates.json") -> Dict:
    """
    For each estimated phase, ranks age groups by susceptibility (total
    contact rate received, row sums of A) and infectiousness (total contact
    rate emitted, column sums of A). Groups are numbered from 1.
    """
    try:
        estimates = dataio.read_estimates_json(workspace_path(estimates_file))
        rankings = []
        for est in estimates:
            ranking = group_rankings(est["A"])
            rankings.append({
                "phase": est.get("phase_index"),
                "most_susceptible": [g + 1 for g in ranking.most_susceptible],
                "most_infectious": [g + 1 for g in ranking.most_infectious],
                "susceptibility": ranking.susceptibility.tolist(),
                "infectiousness": ranking.infectiousness.tolist(),
            })
    except AgeSirError as exc:
        return error(str(exc))
    logger.info("ranked age groups for %d phases", len(rankings))
    return {"status": "success", "rankings": rankings}


# ------------- The Agent -------------
phase_analyst_agent = Agent(
    name="phase_analyst_agent",
    model=get_settings().agent_model,
    description="Agent that interprets detected contact phases and per-phase contact-rate estimates.",
    instruction="""
Explain how contact patterns changed across the detected phases. Use summarize_phases to list the phases
and the days with the strongest change signal, and rank_age_groups to say which age groups were most
susceptible and most infectious in each phase. Point out groups whose rank moves between phases.
""",
    tools=[summarize_phases, rank_age_groups],
)
