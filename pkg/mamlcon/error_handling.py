#!/usr/bin/env python3
"""
Error Handling Module for the MAMLCon toolkit

This module provides the exception hierarchy shared by every component,
config-dict validation, and the helpers the command line uses to report
failures.
"""

import functools
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

# Configure module logger
logger = logging.getLogger(__name__)


class MamlconError(Exception):
    """Base exception for toolkit errors."""
    def __init__(self, message: str, error_code: str = "UNKNOWN_ERROR", details: Optional[Dict] = None):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.details = details or {}


class ConfigurationError(MamlconError):
    """Configuration-related errors."""
    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(message, "CONFIGURATION_ERROR", details)


class ValidationError(MamlconError):
    """Input validation errors (labels, masks, scenario strings)."""
    def __init__(self, message: str, details: Optional[Dict] = None, error_code: str = "VALIDATION_ERROR"):
        super().__init__(message, error_code, details)


class ShapeError(ValidationError):
    """Tensor dimension mismatches."""
    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(message, details, "SHAPE_ERROR")


class NumericalError(MamlconError):
    """Non-finite values where finite ones are required."""
    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(message, "NUMERICAL_ERROR", details)


class SamplingError(MamlconError):
    """Dataset too small for the requested scenario."""
    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(message, "SAMPLING_ERROR", details)


class ArchiveError(MamlconError):
    """Malformed or inconsistent feature archives."""
    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(message, "ARCHIVE_ERROR", details)


def log_failures(func: Callable) -> Callable:
    """
    Decorator for command execution with uniform error reporting.

    Toolkit errors are logged and re-raised unchanged; anything else is
    wrapped in a MamlconError carrying the function name.

    Args:
        func: Function to wrap

    Returns:
        Wrapped function
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except MamlconError as e:
            logger.error(f"{func.__name__} failed: {e.error_code}: {e.message}")
            raise
        except Exception as e:
            error_msg = f"Error in {func.__name__}: {str(e)}"
            logger.error(error_msg, exc_info=True)
            raise MamlconError(error_msg, "EXECUTION_ERROR", {"function": func.__name__, "original_error": str(e)}) from e

    return wrapper


def validate_fields(data: Dict, required_fields: List[str], field_types: Optional[Dict[str, Any]] = None,
                    section: str = "config") -> Dict[str, Any]:
    """
    Validate a configuration dictionary with type checking.

    Args:
        data: Dictionary to validate
        required_fields: List of required field names
        field_types: Optional type (or tuple of types) per field
        section: Name used in error messages

    Returns:
        The validated dictionary

    Raises:
        ConfigurationError: If validation fails
    """
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{section}' must be a mapping", {"section": section})

    missing_fields = [field for field in required_fields if field not in data]
    if missing_fields:
        raise ConfigurationError(f"Missing required fields in '{section}': {missing_fields}",
                                 {"section": section, "missing": missing_fields})

    if field_types:
        for field, expected_type in field_types.items():
            if field not in data:
                continue
            value = data[field]
            # bool is an int subclass; reject it for numeric fields
            if isinstance(value, bool) and expected_type is not bool:
                ok = False
            else:
                ok = isinstance(value, expected_type)
            if not ok:
                name = getattr(expected_type, "__name__", None) or "/".join(t.__name__ for t in expected_type)
                raise ConfigurationError(f"Field '{section}.{field}' must be of type {name}",
                                         {"section": section, "field": field})

    return data


def format_error_for_user(error: Exception) -> str:
    """
    Format error message for the command line (no tracebacks).

    Args:
        error: Exception to format

    Returns:
        User-friendly error message
    """
    if isinstance(error, MamlconError):
        message = f"❌ {error.error_code}: {error.message}"
        deficit = error.details.get("deficit")
        if deficit:
            message += f" (deficit: {deficit})"
        return message
    if isinstance(error, FileNotFoundError):
        return f"❌ File not found: {error.filename or error}"
    return f"❌ Unexpected error: {error}"


def setup_error_handling() -> None:
    """
    Install a global hook that logs uncaught exceptions.
    """
    def handle_exception(exc_type, exc_value, exc_traceback):
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
            return

        logger.critical("Uncaught exception", exc_info=(exc_type, exc_value, exc_traceback))

    sys.excepthook = handle_exception
