"""Exception hierarchy shared by the library, the CLI and the agent tools."""


class AgeSirError(Exception):
    """Base class for every error raised by age_sir_analyst."""


class InputError(AgeSirError):
    """Bad parameters, malformed files or a violated precondition."""


class ParameterError(InputError):
    """A ModelParams candidate failed validation."""


class NumericalError(AgeSirError):
    """Non-finite state, out-of-range compartment or a solver that gave up."""


class AbsorbedError(AgeSirError):
    """The chain reached a state with zero total rate. Signals completion."""
