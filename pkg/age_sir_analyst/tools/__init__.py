from .epidemic_sim import integrate_scenario, simulate_scenario
from .epidemic_fit import preprocess_case_counts, detect_contact_phases, estimate_contact_rates
