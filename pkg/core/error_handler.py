"""
Centralized error handling for IAV Coop Sim.
Provides consistent error classification, logging, response formatting and
process exit codes.
"""

import logging
import time
import traceback
from functools import wraps
from typing import Any, Callable, Dict, List, Tuple

from .utils import (
    CodecError, InvalidScenario, ScenarioError, MalformedTrace,
    UnknownIntersection, OffRoute, OffLane, UnknownVehicle,
)
from .config import config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_COLLISION = 2


class ErrorHandler:
    """Centralized error handling for simulator operations."""

    # Error code mappings for consistent error reporting
    ERROR_CODES = {
        'SCENARIO_ERROR': 4001,
        'INVALID_SCENARIO': 4002,
        'CODEC_ERROR': 4003,
        'FILE_NOT_FOUND': 4004,
        'PERMISSION_DENIED': 4005,
        'GEOMETRY_ERROR': 4006,
        'TRACE_ERROR': 4007,
        'INTERNAL_ERROR': 5000,
    }

    @staticmethod
    def wrap_operation(operation_name: str, tool_name: str) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
        """
        Decorator to wrap operations with consistent error handling.

        Args:
            operation_name: Name of the operation being performed
            tool_name: Name of the tool performing the operation
        """
        def decorator(func: Callable[..., Any]) -> Callable[..., Any]:
            @wraps(func)
            def wrapper(*args: Any, **kwargs: Any) -> Any:
                context = {
                    'tool': tool_name,
                    'operation': operation_name,
                    'timestamp': time.time(),
                    'function': func.__name__,
                    'kwargs_keys': list(kwargs.keys()),
                }
                try:
                    start_time = time.time()
                    result = func(*args, **kwargs)
                    duration = time.time() - start_time
                    if duration > 30.0:
                        logger.warning(f"Slow operation: {tool_name}.{operation_name} took {duration:.2f}s")
                    if isinstance(result, dict):
                        result.setdefault('success', True)
                    return result
                except Exception as e:
                    return ErrorHandler.handle_error(e, context)

            return wrapper
        return decorator

    @staticmethod
    def handle_error(error: Exception, context: Dict[str, Any]) -> Dict[str, Any]:
        """
        Handle and format errors with consistent structure.

        Args:
            error: Exception that occurred
            context: Operation context information

        Returns:
            Formatted error response
        """
        error_code, error_category = ErrorHandler._classify_error(error)

        error_response: Dict[str, Any] = {
            'success': False,
            'error': str(error),
            'error_type': type(error).__name__,
            'error_code': error_code,
            'error_category': error_category,
            'exit_code': ErrorHandler.exit_code_for(error),
            'timestamp': time.time(),
            'context': {
                'tool': context.get('tool', 'unknown'),
                'operation': context.get('operation', 'unknown'),
                'function': context.get('function', 'unknown'),
            },
        }

        line = getattr(error, 'line', 0)
        if line:
            error_response['line'] = line
        key = getattr(error, 'key', None)
        if key:
            error_response['key'] = key

        suggestions = ErrorHandler._get_error_suggestions(error)
        if suggestions:
            error_response['suggestions'] = suggestions

        if config.log_level == 'DEBUG':
            original = getattr(error, 'original_error', None)
            error_response['debug'] = {
                'traceback': traceback.format_exc(),
                'full_context': context,
                'original_error': str(original) if original else None,
            }

        ErrorHandler._log_error(error, error_response)
        return error_response

    @staticmethod
    def exit_code_for(error: Exception) -> int:
        """Process exit code for an error surfaced by the command line.

        Every failure to load, validate or simulate input is exit 1; exit 2 is
        reserved for completed runs whose trace records a collision.
        """
        return EXIT_INPUT_ERROR

    @staticmethod
    def _classify_error(error: Exception) -> Tuple[int, str]:
        """Classify error and return error code and category."""
        if isinstance(error, ScenarioError):
            return ErrorHandler.ERROR_CODES['SCENARIO_ERROR'], 'scenario'
        elif isinstance(error, InvalidScenario):
            return ErrorHandler.ERROR_CODES['INVALID_SCENARIO'], 'scenario'
        elif isinstance(error, CodecError):
            return ErrorHandler.ERROR_CODES['CODEC_ERROR'], 'codec'
        elif isinstance(error, MalformedTrace):
            return ErrorHandler.ERROR_CODES['TRACE_ERROR'], 'trace'
        elif isinstance(error, (UnknownIntersection, OffRoute, OffLane, UnknownVehicle)):
            return ErrorHandler.ERROR_CODES['GEOMETRY_ERROR'], 'geometry'
        elif isinstance(error, FileNotFoundError):
            return ErrorHandler.ERROR_CODES['FILE_NOT_FOUND'], 'file_system'
        elif isinstance(error, PermissionError):
            return ErrorHandler.ERROR_CODES['PERMISSION_DENIED'], 'file_system'
        else:
            return ErrorHandler.ERROR_CODES['INTERNAL_ERROR'], 'internal'

    @staticmethod
    def _get_error_suggestions(error: Exception) -> List[str]:
        """Get helpful suggestions based on error type."""
        suggestions = []

        if isinstance(error, ScenarioError):
            suggestions.extend([
                "Check the line reported above for a typo in the key or section name",
                "Run 'iav-coop-sim validate --scenario FILE' after editing",
            ])
        elif isinstance(error, InvalidScenario):
            suggestions.extend([
                "Check that every vehicle references an existing route or lists goals",
                "Check that spawn positions lie on the vehicle's route",
            ])
        elif isinstance(error, MalformedTrace):
            suggestions.append("Replay only traces written by 'iav-coop-sim run --trace'")
        elif isinstance(error, FileNotFoundError):
            suggestions.extend([
                "Verify the file path is correct",
                "Use a path relative to the current directory or an absolute path",
            ])

        return suggestions

    @staticmethod
    def _log_error(error: Exception, error_response: Dict[str, Any]) -> None:
        """Log error with appropriate level based on category."""
        category = error_response['error_category']
        message = f"[{category.upper()}] {error_response['error_type']}: {error_response['error']}"

        if category in ('scenario', 'trace', 'file_system'):
            logger.warning(message)
        elif category in ('codec', 'geometry'):
            logger.info(message)
        else:
            logger.error(message)
            if config.log_level == 'DEBUG':
                logger.debug(f"Error context: {error_response.get('context')}")


def handle_sim_errors(operation_name: str, tool_name: str) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    """Convenience decorator for tool operations."""
    return ErrorHandler.wrap_operation(operation_name, tool_name)
