from typing import Optional


class LabError(Exception):
    """Base error: a detail message plus the exit code the runner reports."""

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class SizeError(LabError):
    pass


class ConnectivityError(LabError):
    pass


class ParameterError(LabError, ValueError):
    pass


class EllipticityError(LabError):
    pass


class AccretivityError(LabError):
    pass


class UnsupportedOperatorError(LabError):
    pass


class ConditioningError(LabError):
    pass


class KernelLeakError(LabError):
    pass


class DegenerateSampleError(LabError):
    pass


class InsufficientDataError(LabError):
    pass


class CampaignError(LabError):
    pass


class ConfigError(LabError):
    """Invalid experiment configuration; detail lists `field.path: message` lines."""
