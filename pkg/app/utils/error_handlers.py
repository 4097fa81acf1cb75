"""
Global exception handlers for the command line application
"""
import json
import sys
from datetime import datetime
from typing import Optional, Callable, Dict, Type

from pydantic import ValidationError

from app.utils.exceptions import PipelineError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("error_handlers")


def create_error_response(
    error_code: str,
    message: str,
    user_message: str,
    details: Optional[dict] = None,
) -> dict:
    """Create standardized error payload"""
    return {
        "success": False,
        "error": {
            "code": error_code,
            "message": user_message,
            "technical_message": message,
            "details": details or {},
        },
        "timestamp": datetime.now().isoformat(),
    }


def pipeline_error_handler(command: str, exc: PipelineError) -> tuple[dict, int]:
    """Handle structured pipeline errors"""
    logger.error(f"Pipeline Error: {exc.error_code} - {exc.message} - Command: {command}")
    payload = create_error_response(
        error_code=exc.error_code,
        message=exc.message,
        user_message=exc.user_message,
        details=exc.details,
    )
    return payload, exc.exit_code


def validation_exception_handler(command: str, exc: ValidationError) -> tuple[dict, int]:
    """Handle pydantic validation errors raised while resolving configs"""
    errors = []
    for error in exc.errors():
        field_path = " -> ".join(str(loc) for loc in error["loc"])
        errors.append({
            "field": field_path,
            "message": error["msg"],
            "input": repr(error.get("input")),
            "type": error.get("type"),
        })

    logger.warning(f"Validation error - Command: {command} - Errors: {len(errors)}")

    payload = create_error_response(
        error_code="VALIDATION_ERROR",
        message="Configuration validation failed",
        user_message="Please check the provided configuration and try again.",
        details={"validation_errors": errors},
    )
    return payload, 2


def general_exception_handler(command: str, exc: Exception) -> tuple[dict, int]:
    """Handle unexpected errors"""
    logger.error(
        f"Unexpected error: {type(exc).__name__}: {str(exc)} - Command: {command}",
        exc_info=True,
    )
    payload = create_error_response(
        error_code="INTERNAL_ERROR",
        message=f"Unexpected error: {type(exc).__name__}: {str(exc)}",
        user_message="An unexpected error occurred.",
        details={"exception_type": type(exc).__name__},
    )
    return payload, 1


EXCEPTION_HANDLERS: Dict[Type[BaseException], Callable[[str, Exception], tuple[dict, int]]] = {}


def add_exception_handler(exc_type: Type[BaseException], handler: Callable) -> None:
    EXCEPTION_HANDLERS[exc_type] = handler


def handle_exception(command: str, exc: Exception, stream=None) -> int:
    """Dispatch to the most specific registered handler, write the error JSON, return the exit code"""
    handler = general_exception_handler
    for klass in type(exc).__mro__:
        if klass in EXCEPTION_HANDLERS:
            handler = EXCEPTION_HANDLERS[klass]
            break
    payload, exit_code = handler(command, exc)
    stream = stream or sys.stderr
    stream.write(json.dumps(payload, default=str) + "\n")
    stream.flush()
    return exit_code
