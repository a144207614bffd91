"""
Result documents printed by the CLI.

Every subcommand prints exactly one JSON document on stdout:
- a success document naming the stage, the artifacts it wrote and a summary
- an error document with a stable error type and the process exit code

These documents are console output, not pipeline artifacts, so they are the
only place where timestamps and random response ids appear.
"""

import json
import uuid
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from models.errors import UrbanPulseError

RESPONSE_VERSION = '1.0'


def create_success_response(
    stage: str,
    artifacts: List[str],
    summary: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Create the success document for a finished stage.

    Args:
        stage: Subcommand name
        artifacts: Paths written by the stage
        summary: Stage-specific counters

    Returns:
        Dictionary ready for JSON rendering
    """
    return {
        'success': True,
        'data': {
            'stage': stage,
            'artifacts': sorted(artifacts),
            'summary': summary or {},
        },
        'metadata': _metadata(),
    }


def create_error_response(
    error_message: str,
    exit_code: int = 1,
    error_type: Optional[str] = None,
    details: Optional[Dict[str, Any]] = None
) -> Dict[str, Any]:
    """
    Create the machine-readable error document.

    Args:
        error_message: Descriptive error message
        exit_code: Process exit code (default: 1)
        error_type: Stable error type (derived from the exit code when omitted)
        details: Additional error details (optional)

    Returns:
        Dictionary ready for JSON rendering
    """
    if error_type is None:
        error_type = _determine_error_type(exit_code)

    error_body = {
        'success': False,
        'error': {
            'type': error_type,
            'message': error_message,
            'code': exit_code
        },
        'metadata': _metadata(),
    }

    if details:
        error_body['error']['details'] = details

    return error_body


def create_exception_response(error: Exception) -> Dict[str, Any]:
    """
    Map an exception onto an error document.

    Domain errors keep their own type and exit code; anything else is an
    internal error with exit code 1.
    """
    if isinstance(error, UrbanPulseError):
        return create_error_response(
            error.message,
            exit_code=error.exit_code,
            error_type=error.error_type,
            details=error.details or None,
        )
    return create_error_response(f"{type(error).__name__}: {error}", exit_code=1)


def render_response(document: Dict[str, Any]) -> str:
    """Render a result document as indented JSON."""
    return json.dumps(document, ensure_ascii=False, default=str, indent=2)


def _metadata() -> Dict[str, Any]:
    return {
        'timestamp': datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z'),
        'response_id': str(uuid.uuid4()),
        'version': RESPONSE_VERSION,
    }


def _determine_error_type(exit_code: int) -> str:
    """
    Error type of a failure known only by its exit code: unexpected
    exceptions and command-line usage errors.
    """
    exit_code_mapping = {
        1: "INTERNAL_ERROR",
        2: "CONFIG_ERROR",
        3: "VALIDATION_ERROR",
        4: "INSUFFICIENT_DATA",
        5: "ARTIFACT_NOT_FOUND",
        6: "FINGERPRINT_MISMATCH",
        7: "INCOMPLETE_CURVE",
    }
    return exit_code_mapping.get(exit_code, "UNKNOWN_ERROR")
