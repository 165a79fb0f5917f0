"""Exception taxonomy; each class carries the CLI exit code it maps to."""


class SRBridgeError(Exception):
    exit_code = 10


class ConfigError(SRBridgeError):
    exit_code = 1


class QuadratureError(SRBridgeError):
    exit_code = 2


class KernelNegativityError(QuadratureError):
    pass


class ConvergenceError(SRBridgeError):
    exit_code = 3

    def __init__(self, message, residuals=None, completed=None):
        super().__init__(message)
        self.residuals = list(residuals or [])
        self.completed = completed


class MissingArtifactError(SRBridgeError):
    exit_code = 4


class DegenerateMassError(SRBridgeError):
    exit_code = 1


class DivisionUnderflowError(ConvergenceError):
    pass


class EndpointMismatchError(ConvergenceError):
    pass


class BoxExitError(ConfigError):
    """Too many particles left the simulation box (the box is too small)."""
