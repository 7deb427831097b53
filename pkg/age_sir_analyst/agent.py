from google.adk import Agent

# Local Imports
from . import prompts
from .settings import get_settings
from .tools import (
    integrate_scenario,
    simulate_scenario,
    preprocess_case_counts,
    detect_contact_phases,
    estimate_contact_rates,
)
from .sub_agents import (
    phase_analyst_agent
)

# ------------- The Agent -------------
root_agent = Agent(
    name="age_sir_analyst",
    model=get_settings().agent_model,   # AGE_SIR_AGENT_MODEL overrides
    description=(
        "Agent to fit, segment and simulate age-structured SIR epidemics."
    ),
    instruction=prompts.ROOT_AGENT_INSTR,
    sub_agents=[phase_analyst_agent],
    tools=[
        preprocess_case_counts,
        detect_contact_phases,
        estimate_contact_rates,
        integrate_scenario,
        simulate_scenario,
    ],
)
