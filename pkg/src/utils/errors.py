"""
Error types
Every failure raised by the library derives from SgdRiskError
"""

from typing import Optional


class SgdRiskError(Exception):
    """Base class for all sgdrisk errors"""


class InvalidArgumentError(SgdRiskError, ValueError):
    """An argument violates a documented precondition"""


class DegenerateProblemError(SgdRiskError, ValueError):
    """The problem has no scale (all-zero spectrum with no trace coupling)"""


class StabilityViolationError(SgdRiskError):
    """The step size violates eta <= 1 / (lambda_max + alpha * Tr(H))"""

    def __init__(self, message: str, eta: Optional[float] = None, max_stable_lr: Optional[float] = None):
        super().__init__(message)
        self.eta = eta
        self.max_stable_lr = max_stable_lr


class SingularSpectrumError(SgdRiskError):
    """A Lambda^{-1} norm was requested on a zero eigen-direction carrying mass"""


class ConfigError(SgdRiskError):
    """An experiment config field is missing or invalid"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
