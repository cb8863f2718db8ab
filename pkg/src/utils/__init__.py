"""
Utils Package
"""

from .errors import (
    ConfigError,
    DegenerateProblemError,
    InvalidArgumentError,
    SgdRiskError,
    SingularSpectrumError,
    StabilityViolationError,
)
from .export import write_csv, write_json

__all__ = [
    'SgdRiskError', 'InvalidArgumentError', 'DegenerateProblemError',
    'StabilityViolationError', 'SingularSpectrumError', 'ConfigError',
    'write_csv', 'write_json',
]
