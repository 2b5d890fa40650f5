"""
Planner exceptions.
Every error carries the process exit code the command line reports for it.
"""


class PlannerError(Exception):
    """Base class for all planner failures."""

    exit_code = 1


class InputError(PlannerError):
    """A dataset file could not be parsed. Carries file, line and column when known."""

    exit_code = 2

    def __init__(self, message, path=None, line=None, column=None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.column = column
        location = ""
        if self.path:
            location = self.path
            if line is not None:
                location += f":{line}"
            if column:
                location += f" [{column}]"
            location += ": "
        super().__init__(f"{location}{message}")


class ParameterError(PlannerError):
    exit_code = 2


class StructuralError(PlannerError):
    """The instance cannot be turned into a timeline or a model."""

    exit_code = 2


class GenerationError(PlannerError):
    exit_code = 2


class InfeasibleError(PlannerError):
    exit_code = 3


class SolverEnvironmentError(PlannerError):
    """The configured solver could not be started."""

    exit_code = 4

    def __init__(self, message, config_key=None):
        self.config_key = config_key
        if config_key:
            message = f"{message} (set {config_key})"
        super().__init__(message)


class DecodeError(PlannerError):
    """A solver value could not be mapped back onto the schedule."""
