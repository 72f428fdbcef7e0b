"""Custom exceptions for the jobpower pipeline"""

from typing import Optional


class JobPowerException(Exception):
    """Base exception for jobpower"""

    exit_code = 1


class ConfigurationError(JobPowerException):
    """Raised when configuration is invalid or a budget is infeasible"""

    exit_code = 2


class DataFormatError(JobPowerException):
    """Raised when an input file cannot be parsed"""

    exit_code = 3

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(JobPowerException, ValueError):
    """Raised when an argument is outside the domain of an operation"""

    exit_code = 3


class NumericalError(JobPowerException):
    """Raised when a numerical procedure fails"""

    exit_code = 4


class DegenerateLikelihoodError(NumericalError):
    """Raised when every regime weight underflows in a categorical update"""
    pass


class MixtureFitError(NumericalError):
    """Raised when the parent mixture approximation misses its tolerance"""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative L2 residual {residual:.4g})")
        self.residual = residual


class SamplerError(NumericalError):
    """Raised when a job update fails inside the MCMC sweep"""

    def __init__(self, message: str, job_id: str, iteration: int):
        super().__init__(f"job {job_id}, iteration {iteration}: {message}")
        self.job_id = job_id
        self.iteration = iteration
