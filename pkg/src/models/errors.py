"""
Exception hierarchy for the urbanpulse pipeline.

Every domain failure carries a stable ``error_type`` and the CLI exit code
it maps to, so the entry point never has to guess a status from message text.
"""

from typing import Any, Dict, Optional


class UrbanPulseError(Exception):
    """Base class for every expected pipeline failure."""

    error_type = "INTERNAL_ERROR"
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigError(UrbanPulseError):
    error_type = "CONFIG_ERROR"
    exit_code = 2


class FoldSpecError(UrbanPulseError):
    error_type = "FOLD_SPEC_ERROR"
    exit_code = 2


class ActivityParseError(UrbanPulseError):
    """Malformed activity or registry row."""

    error_type = "PARSE_ERROR"
    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, {"line": line} if line is not None else None)
        self.line = line


class ActivityValidationError(ActivityParseError):
    """Row parses but violates a data invariant (e.g. negative count)."""

    error_type = "VALIDATION_ERROR"


class EmptyCubeError(UrbanPulseError):
    error_type = "EMPTY_CUBE"
    exit_code = 3


class DbueValidationError(UrbanPulseError):
    error_type = "DBUE_VALIDATION_ERROR"
    exit_code = 3


class InsufficientDataError(UrbanPulseError):
    error_type = "INSUFFICIENT_DATA"
    exit_code = 4


class DegenerateModelError(UrbanPulseError):
    error_type = "DEGENERATE_MODEL"
    exit_code = 4


class ModelNotFoundError(UrbanPulseError):
    error_type = "MODEL_NOT_FOUND"
    exit_code = 5

    def __init__(self, cell_id: str, service: str):
        super().__init__(
            f"model not found for cell '{cell_id}', service '{service}'",
            {"cell_id": cell_id, "service": service},
        )
        self.cell_id = cell_id
        self.service = service


class ArtifactNotFoundError(UrbanPulseError):
    error_type = "ARTIFACT_NOT_FOUND"
    exit_code = 5


class FingerprintMismatchError(UrbanPulseError):
    error_type = "FINGERPRINT_MISMATCH"
    exit_code = 6


class IncompleteCurveError(UrbanPulseError):
    error_type = "INCOMPLETE_CURVE"
    exit_code = 7
