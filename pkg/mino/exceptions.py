"""
Error hierarchy for the MINO toolkit

Every failure raised on purpose by the package derives from MinoError so the
CLI can map it to an exit code. Precondition failures that are plain bad
arguments also derive from ValueError.
"""

from typing import Optional


class MinoError(Exception):
    """Base class for all toolkit errors"""


class ConfigError(MinoError):
    """Invalid configuration, override or command-line usage"""


class GeometryError(MinoError, ValueError):
    """Invalid point set, grid or neighbor-search request"""


class ShapeError(MinoError, ValueError):
    """Array shapes that do not fit together"""


class FactorizationError(MinoError):
    """Cholesky factorization failed even at the largest jitter"""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


class GradientError(MinoError):
    """Misuse of the reverse-mode engine"""


class NumericalError(MinoError):
    """Non-finite loss or integrator breakdown"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class ContainerError(MinoError):
    """Unreadable or unwritable dataset / checkpoint file"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message} ({path})" if path else message)
        self.path = path
