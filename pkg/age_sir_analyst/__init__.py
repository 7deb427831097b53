"""Age-structured SIR modelling: mean-field ODE, exact network simulation, estimation and phase detection.

The ADK agent lives in ``age_sir_analyst.agent`` and is imported on demand,
so the numerical library works without google-adk installed.
"""

from .errors import AbsorbedError, AgeSirError, InputError, NumericalError, ParameterError
from .model_core import GroupFractions, ModelParams, Trajectory, integrate_ode, iterate_discrete, validate_params
