from .phase_analyst import phase_analyst_agent
