"""
Typed errors for the beamforming library
"""
from typing import Any, Optional


class BisacError(Exception):
    """Base error with a short machine-readable code"""
    code = "error"

    def __init__(self, message: str, code: Optional[str] = None):
        self.message = message
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}")


class ValidationError(BisacError):
    code = "validation"


class NotPsdError(BisacError):
    code = "not_psd"


class SingularMatrixError(BisacError):
    code = "singular"


class DomainError(BisacError):
    code = "domain"


class DegenerateDirectionError(BisacError):
    """Beam carries no power toward the channel that defines the extraction"""
    code = "degenerate_direction"


class ExtractionInvalidError(BisacError):
    """A rank-one extraction clause failed"""
    code = "extraction_invalid"

    def __init__(self, clause: str, message: str):
        self.clause = clause
        super().__init__(f"clause ({clause}): {message}")


class InfeasibleError(BisacError):
    code = "infeasible"

    def __init__(self, message: str, report: Optional[Any] = None):
        self.report = report
        super().__init__(message)


class SolverFailure(BisacError):
    code = "solver_failure"

    def __init__(self, message: str, report: Optional[Any] = None):
        self.report = report
        super().__init__(message)


class ConfigError(BisacError):
    """Malformed process configuration; the message names the variable"""
    code = "config"
