"""
Exception hierarchy shared by the engines and the runner.
"""


class LagvacError(Exception):
    """Base class for every error raised by the simulator."""


class DomainError(LagvacError, ValueError):
    """A constitutive function or diagnostic got inputs outside its domain."""


class AssumptionError(LagvacError, ValueError):
    """
    One of the admissibility assumptions on the data failed.
    The message always starts with the assumption tag, e.g. "(A4) violated: ...".
    """

    def __init__(self, assumption, detail):
        self.assumption = assumption
        super().__init__(f"{assumption} violated: {detail}")


class PreconditionError(LagvacError, ValueError):
    pass


class SolverError(LagvacError, RuntimeError):
    """Time stepping cannot continue. `state` is the last accepted state."""

    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message)


class FitError(LagvacError, ValueError):
    pass


class ReconstructionError(LagvacError, ValueError):
    pass


class ConfigError(LagvacError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ArtifactError(LagvacError, ValueError):
    """A file of a run directory is missing or unreadable. `path` names it."""

    def __init__(self, path, detail):
        self.path = str(path)
        super().__init__(f"{path}: {detail}")
