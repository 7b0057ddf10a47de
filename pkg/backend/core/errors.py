"""Exception hierarchy shared by the lab.

Library code raises these; the CLI and the experiment runner turn them into
machine-readable JSON via ``to_dict``.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for every failure the lab reports on purpose."""

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"error": type(self).__name__, "message": self.message}
        payload.update(self.details)
        return payload


# ------------------------------
# Physics
# ------------------------------
class InvalidStateError(LabError, ValueError):
    pass


class SingularityError(LabError, ArithmeticError):
    pass


# ------------------------------
# Data generation / container
# ------------------------------
class GenerationError(LabError, RuntimeError):
    pass


class BehindCameraError(LabError, ValueError):
    pass


class DatasetError(LabError, IOError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedBlobError(DatasetError):
    pass


class ManifestShapeError(DatasetError):
    pass


# ------------------------------
# Models / training
# ------------------------------
class ShapeMismatchError(LabError, ValueError):
    pass


class CapacityError(LabError, ValueError):
    pass


class DivergenceError(LabError, RuntimeError):
    pass


class GateError(LabError, RuntimeError):
    pass


# ------------------------------
# Configuration
# ------------------------------
class ConfigValidationError(LabError, ValueError):
    def __init__(self, key: str, constraint: str, value: Optional[Any] = None) -> None:
        super().__init__(f"invalid config value for '{key}': {constraint}", key=key, constraint=constraint)
        self.key = key
        self.constraint = constraint
        if value is not None:
            self.details["value"] = repr(value)
